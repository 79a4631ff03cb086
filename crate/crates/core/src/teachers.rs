//! The two teachers: a classifier sampled with Monte Carlo dropout and kept
//! as an exponential moving average of the student, and a black-box label
//! provider reached through [`LalmProvider`] with an append-only cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataio::FeatureDataset;
use crate::error::{Error, Result};
use crate::numkit::{softmax, MlpClassifier};
use crate::uncertainty::{ProbDist, TeacherSampleSet};

/// One query to a label provider.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a> {
    pub utterance_id: &'a str,
    pub class_names: &'a [String],
    pub temperature: f64,
    pub sample_index: usize,
}

/// A black-box teacher that returns one class distribution per query.
///
/// The returned distribution must be aligned with `class_names`.
pub trait LalmProvider: Send + Sync {
    fn sample(&self, request: &SampleRequest<'_>) -> Result<ProbDist>;
}

impl<P: LalmProvider + ?Sized> LalmProvider for Box<P> {
    fn sample(&self, request: &SampleRequest<'_>) -> Result<ProbDist> {
        (**self).sample(request)
    }
}

impl<P: LalmProvider + ?Sized> LalmProvider for &P {
    fn sample(&self, request: &SampleRequest<'_>) -> Result<ProbDist> {
        (**self).sample(request)
    }
}

/// Wraps a provider and counts the queries that reach it.
#[derive(Debug, Default)]
pub struct CountingProvider<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: LalmProvider> LalmProvider for CountingProvider<P> {
    fn sample(&self, request: &SampleRequest<'_>) -> Result<ProbDist> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.sample(request)
    }
}

/// Provider that never answers; lookups must be served by the cache.
#[derive(Debug, Default, Clone, Copy)]
pub struct CacheOnlyProvider;

impl LalmProvider for CacheOnlyProvider {
    fn sample(&self, request: &SampleRequest<'_>) -> Result<ProbDist> {
        Err(Error::CacheMiss {
            id: request.utterance_id.to_string(),
            index: request.sample_index,
        })
    }
}

/// Result of [`parse_lalm_response`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub dist: ProbDist,
    /// True when the payload was unusable and the uniform fallback was used.
    pub fell_back: bool,
}

/// Parses `{"probs": {class_name: number, ...}}`. Negative values are clipped
/// to zero, missing classes count as zero and the result is renormalized.
/// Anything unusable degrades to the uniform distribution.
pub fn parse_lalm_response(payload: &str, class_names: &[String]) -> ParsedResponse {
    match try_parse_probs(payload, class_names) {
        Some(dist) => ParsedResponse {
            dist,
            fell_back: false,
        },
        None => {
            let shown: String = payload.chars().take(80).collect();
            log::warn!("unparseable teacher response, using uniform: {shown:?}");
            ParsedResponse {
                dist: ProbDist::uniform(class_names.len()),
                fell_back: true,
            }
        }
    }
}

fn try_parse_probs(payload: &str, class_names: &[String]) -> Option<ProbDist> {
    let value: Value = serde_json::from_str(payload.trim()).ok()?;
    let probs = value.get("probs")?.as_object()?;
    let lookup = |name: &str| -> f64 {
        let v = probs.get(name).or_else(|| {
            probs
                .iter()
                .find(|(k, _)| k.trim().eq_ignore_ascii_case(name))
                .map(|(_, v)| v)
        });
        v.and_then(Value::as_f64)
            .filter(|x| x.is_finite())
            .map_or(0.0, |x| x.max(0.0))
    };
    let raw: Vec<f64> = class_names.iter().map(|c| lookup(c)).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    ProbDist::new(raw.iter().map(|x| x / total).collect()).ok()
}

#[derive(Serialize)]
struct PredictRequestBody<'a> {
    utterance_id: &'a str,
    classes: &'a [String],
    temperature: f64,
    sample_index: usize,
}

/// Client for a remote teacher service speaking `POST /v1/predict`.
#[derive(Debug)]
pub struct HttpProvider {
    url: String,
    token: Option<String>,
    max_retries: u32,
    initial_backoff: Duration,
    agent: ureq::Agent,
    parse_failures: AtomicUsize,
}

impl HttpProvider {
    /// `endpoint` is the service base URL; requests go to `{endpoint}/v1/predict`.
    pub fn new(endpoint: &str, token: Option<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build();
        Self {
            url: format!("{}/v1/predict", endpoint.trim_end_matches('/')),
            token,
            max_retries: 3,
            initial_backoff: Duration::from_secs(1),
            agent: ureq::Agent::new_with_config(config),
            parse_failures: AtomicUsize::new(0),
        }
    }

    pub fn with_retries(mut self, max_retries: u32, initial_backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.initial_backoff = initial_backoff;
        self
    }

    /// Number of responses that fell back to the uniform distribution.
    pub fn parse_failures(&self) -> usize {
        self.parse_failures.load(Ordering::Relaxed)
    }

    fn attempt(&self, body: &str) -> std::result::Result<String, String> {
        let mut req = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(format!("HTTP {status}"));
        }
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }
}

impl LalmProvider for HttpProvider {
    fn sample(&self, request: &SampleRequest<'_>) -> Result<ProbDist> {
        let body = serde_json::to_string(&PredictRequestBody {
            utterance_id: request.utterance_id,
            classes: request.class_names,
            temperature: request.temperature,
            sample_index: request.sample_index,
        })?;
        let mut backoff = self.initial_backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(payload) => {
                    let parsed = parse_lalm_response(&payload, request.class_names);
                    if parsed.fell_back {
                        self.parse_failures.fetch_add(1, Ordering::Relaxed);
                    }
                    return Ok(parsed.dist);
                }
                Err(msg) if attempt < self.max_retries => {
                    log::warn!(
                        "teacher request for ({}, {}) failed: {msg}; retrying in {backoff:?}",
                        request.utterance_id,
                        request.sample_index
                    );
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(msg) => {
                    return Err(Error::Transport(format!(
                        "{} for ({}, {}) after {} attempts: {msg}",
                        self.url,
                        request.utterance_id,
                        request.sample_index,
                        attempt + 1
                    )))
                }
            }
        }
    }
}

/// Parameters of the synthetic stand-in teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyOracleConfig {
    /// Probability that a sample's mode is the true label.
    pub accuracy: f64,
    /// Sharpness of emitted distributions; larger is closer to one-hot.
    pub concentration: f64,
    pub seed: u64,
}

impl NoisyOracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.accuracy > 0.0 && self.accuracy <= 1.0) {
            return Err(Error::Validation(format!(
                "oracle accuracy {} outside (0, 1]",
                self.accuracy
            )));
        }
        if self.concentration.is_nan() || self.concentration <= 0.0 {
            return Err(Error::Validation(format!(
                "oracle concentration {} must be positive",
                self.concentration
            )));
        }
        Ok(())
    }
}

/// Chance that a sample's mode is the true label on a confusable input.
const CONFUSED_HIT_RATE: f64 = 0.25;
/// Share of the confusable miss mass that goes to the input's decoy class.
const DECOY_SHARE: f64 = 2.0 / 3.0;

#[derive(Debug, Clone)]
struct OracleItem {
    label: usize,
    confusable: bool,
    decoy: usize,
}

/// Synthetic teacher built from a labeled dataset.
///
/// Inputs on one side of a random hyperplane in feature space are
/// "confusable": their samples disagree, landing on the true label only a
/// quarter of the time and otherwise mostly on a fixed decoy class. All other
/// inputs are always answered with the true label as the mode. The confusable
/// fraction is chosen so that the expected share of samples whose mode is the
/// true label equals `accuracy`. Each emitted distribution is a Dirichlet
/// draw with `1 + concentration` mass on the mode, with the mode swapped into
/// first place if the draw put it elsewhere. At temperature zero the oracle is
/// deterministic: the mode is the input's most likely answer and the
/// distribution is the Dirichlet mean.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    config: NoisyOracleConfig,
    n_classes: usize,
    items: HashMap<String, OracleItem>,
}

impl NoisyOracle {
    pub fn new(config: NoisyOracleConfig, labeled: &FeatureDataset) -> Result<Self> {
        config.validate()?;
        let labels = labeled.labels()?;
        let n_classes = labeled.n_classes();
        let n = labeled.len();

        let confused_share = if config.accuracy >= 1.0 {
            0.0
        } else {
            ((1.0 - config.accuracy) / (1.0 - CONFUSED_HIT_RATE)).min(1.0)
        };
        let n_confused = (confused_share * n as f64).round() as usize;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6f72_6163_6c65);
        let dim = labeled.manifest().input_len();
        let direction: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut order: Vec<(f64, usize)> = labeled
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                (
                    r.features.iter().zip(&direction).map(|(a, b)| a * b).sum(),
                    i,
                )
            })
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut confusable = vec![false; n];
        for &(_, i) in order.iter().take(n_confused) {
            confusable[i] = true;
        }
        // each class is mistaken for one fixed other class
        let mut decoys: Vec<usize> = (0..n_classes).collect();
        let shift = rng.random_range(1..n_classes);
        decoys
            .iter_mut()
            .for_each(|d| *d = (*d + shift) % n_classes);

        let items = labeled
            .records()
            .iter()
            .zip(labels)
            .zip(confusable)
            .map(|((r, label), confusable)| {
                (
                    r.id.clone(),
                    OracleItem {
                        label,
                        confusable,
                        decoy: decoys[label],
                    },
                )
            })
            .collect();
        Ok(Self {
            config,
            n_classes,
            items,
        })
    }

    pub fn config(&self) -> &NoisyOracleConfig {
        &self.config
    }

    /// Whether the oracle treats this input as confusable.
    pub fn is_confusable(&self, utterance_id: &str) -> Option<bool> {
        self.items.get(utterance_id).map(|it| it.confusable)
    }

    fn mode_weights(&self, item: &OracleItem) -> Vec<f64> {
        let c = self.n_classes;
        let mut w = vec![0.0; c];
        if !item.confusable {
            w[item.label] = 1.0;
            return w;
        }
        let hit = if self.config.accuracy >= CONFUSED_HIT_RATE {
            CONFUSED_HIT_RATE
        } else {
            self.config.accuracy
        };
        let miss = 1.0 - hit;
        w[item.label] = hit;
        if c == 2 {
            w[item.decoy] = miss;
        } else {
            w[item.decoy] = miss * DECOY_SHARE;
            let rest = miss * (1.0 - DECOY_SHARE) / (c - 2) as f64;
            for (k, wk) in w.iter_mut().enumerate() {
                if k != item.label && k != item.decoy {
                    *wk = rest;
                }
            }
        }
        w
    }

    fn dirichlet_mean(&self, mode: usize) -> ProbDist {
        if self.config.concentration.is_infinite() {
            return ProbDist::one_hot(self.n_classes, mode);
        }
        let total = self.n_classes as f64 + self.config.concentration;
        let mut probs = vec![1.0 / total; self.n_classes];
        probs[mode] = (1.0 + self.config.concentration) / total;
        ProbDist::from_normalized(probs)
    }
}

fn stable_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

impl LalmProvider for NoisyOracle {
    fn sample(&self, request: &SampleRequest<'_>) -> Result<ProbDist> {
        if request.class_names.len() != self.n_classes {
            return Err(Error::Shape(format!(
                "oracle knows {} classes, request names {}",
                self.n_classes,
                request.class_names.len()
            )));
        }
        let item = self.items.get(request.utterance_id).ok_or_else(|| {
            Error::Transport(format!(
                "oracle has no ground truth for {:?}",
                request.utterance_id
            ))
        })?;
        let weights = self.mode_weights(item);
        if request.temperature <= 0.0 {
            let mode = crate::uncertainty::argmax(&weights);
            return Ok(self.dirichlet_mean(mode));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[
            &self.config.seed.to_le_bytes(),
            request.utterance_id.as_bytes(),
            &(request.sample_index as u64).to_le_bytes(),
        ]));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut mode = item.label;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if w > &0.0 && u < acc {
                mode = k;
                break;
            }
        }
        if self.config.concentration.is_infinite() {
            return Ok(ProbDist::one_hot(self.n_classes, mode));
        }
        let mut draws: Vec<f64> = (0..self.n_classes)
            .map(|k| {
                let shape = if k == mode {
                    1.0 + self.config.concentration
                } else {
                    1.0
                };
                let gamma = Gamma::new(shape, 1.0).expect("positive gamma shape");
                gamma.sample(&mut rng)
            })
            .collect();
        let top = crate::uncertainty::argmax(&draws);
        if top != mode {
            draws.swap(top, mode);
        }
        let total: f64 = draws.iter().sum();
        ProbDist::new(draws.into_iter().map(|x| x / total).collect())
    }
}

/// Moves a share of every distribution onto one class, simulating a teacher
/// with a strong systematic preference.
#[derive(Debug)]
pub struct BiasedProvider<P> {
    inner: P,
    class: usize,
    strength: f64,
}

impl<P> BiasedProvider<P> {
    pub fn new(inner: P, class: usize, strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::Validation(format!(
                "bias strength {strength} outside [0, 1]"
            )));
        }
        Ok(Self {
            inner,
            class,
            strength,
        })
    }
}

impl<P: LalmProvider> LalmProvider for BiasedProvider<P> {
    fn sample(&self, request: &SampleRequest<'_>) -> Result<ProbDist> {
        let base = self.inner.sample(request)?;
        if self.class >= base.n_classes() {
            return Err(Error::Shape(format!(
                "bias class {} out of range",
                self.class
            )));
        }
        let mut probs: Vec<f64> = base
            .probs()
            .iter()
            .map(|p| p * (1.0 - self.strength))
            .collect();
        probs[self.class] += self.strength;
        ProbDist::new(probs)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    utterance_id: String,
    sample_index: usize,
    probs: Vec<f64>,
}

/// Append-only store of provider answers keyed by `(utterance_id, sample_index)`.
///
/// Concurrent readers share a lock; appends are serialized and written to the
/// backing file (if any) one JSON line per entry.
#[derive(Debug)]
pub struct TeacherCache {
    n_classes: usize,
    path: Option<PathBuf>,
    entries: RwLock<HashMap<(String, usize), ProbDist>>,
    writer: Option<Mutex<BufWriter<File>>>,
}

impl TeacherCache {
    pub fn in_memory(n_classes: usize) -> Self {
        Self {
            n_classes,
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: None,
        }
    }

    /// Loads an existing cache file (if present) and opens it for appending.
    pub fn open(path: impl AsRef<Path>, n_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let entries = if path.exists() {
            Self::read_entries(path, n_classes)?
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            n_classes,
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    /// Loads a cache file without opening it for writing.
    pub fn load_read_only(path: impl AsRef<Path>, n_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        Ok(Self {
            n_classes,
            path: Some(path.to_path_buf()),
            entries: RwLock::new(Self::read_entries(path, n_classes)?),
            writer: None,
        })
    }

    fn read_entries(path: &Path, n_classes: usize) -> Result<HashMap<(String, usize), ProbDist>> {
        let mut entries = HashMap::new();
        let reader = BufReader::new(File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let rec: CacheLine =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if rec.probs.len() != n_classes {
                return Err(parse_err(format!(
                    "{} probabilities, expected {n_classes}",
                    rec.probs.len()
                )));
            }
            let dist = ProbDist::new(rec.probs).map_err(|e| parse_err(e.to_string()))?;
            // first write wins
            entries
                .entry((rec.utterance_id, rec.sample_index))
                .or_insert(dist);
        }
        Ok(entries)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, utterance_id: &str, sample_index: usize) -> Option<ProbDist> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(&(utterance_id.to_string(), sample_index))
            .cloned()
    }

    pub fn contains(&self, utterance_id: &str, sample_index: usize) -> bool {
        self.get(utterance_id, sample_index).is_some()
    }

    /// Stores `dist` unless the key is already present. Returns the value
    /// held by the cache afterwards.
    pub fn insert(
        &self,
        utterance_id: &str,
        sample_index: usize,
        dist: ProbDist,
    ) -> Result<ProbDist> {
        if dist.n_classes() != self.n_classes {
            return Err(Error::Shape(format!(
                "cache holds {} classes, got {}",
                self.n_classes,
                dist.n_classes()
            )));
        }
        let mut entries = self.entries.write().expect("cache lock poisoned");
        let key = (utterance_id.to_string(), sample_index);
        if let Some(existing) = entries.get(&key) {
            return Ok(existing.clone());
        }
        if let Some(writer) = &self.writer {
            let mut w = writer.lock().expect("cache writer poisoned");
            let line = CacheLine {
                utterance_id: utterance_id.to_string(),
                sample_index,
                probs: dist.probs().to_vec(),
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        entries.insert(key, dist.clone());
        Ok(dist)
    }

    /// First `(id, index)` in `ids × 0..n_samples` that is not cached.
    pub fn first_missing<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a str>,
        n_samples: usize,
    ) -> Option<(String, usize)> {
        let entries = self.entries.read().expect("cache lock poisoned");
        for id in ids {
            for k in 0..n_samples {
                if !entries.contains_key(&(id.to_string(), k)) {
                    return Some((id.to_string(), k));
                }
            }
        }
        None
    }
}

/// Queries the provider `n_samples` times (once at temperature zero), serving
/// cached answers first and caching new ones.
pub fn lalm_predict(
    provider: &dyn LalmProvider,
    cache: &TeacherCache,
    utterance_id: &str,
    class_names: &[String],
    n_samples: usize,
    temperature: f64,
) -> Result<TeacherSampleSet> {
    if n_samples == 0 {
        return Err(Error::Validation("n_samples must be >= 1".into()));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Validation(format!(
            "temperature {temperature} must be >= 0"
        )));
    }
    if class_names.len() != cache.n_classes() {
        return Err(Error::Shape(format!(
            "{} class names for a {}-class cache",
            class_names.len(),
            cache.n_classes()
        )));
    }
    let n = if temperature == 0.0 { 1 } else { n_samples };
    let mut samples = Vec::with_capacity(n);
    for sample_index in 0..n {
        let dist = match cache.get(utterance_id, sample_index) {
            Some(d) => d,
            None => {
                let fresh = provider.sample(&SampleRequest {
                    utterance_id,
                    class_names,
                    temperature,
                    sample_index,
                })?;
                if fresh.n_classes() != class_names.len() {
                    return Err(Error::Shape(format!(
                        "provider returned {} classes for {utterance_id:?}, expected {}",
                        fresh.n_classes(),
                        class_names.len()
                    )));
                }
                cache.insert(utterance_id, sample_index, fresh)?
            }
        };
        samples.push(dist);
    }
    TeacherSampleSet::from_samples(samples)
}

/// Fills `cache` with every sample [`lalm_predict`] would need for `data`
/// and returns how many entries were added.
pub fn populate_cache(
    provider: &dyn LalmProvider,
    cache: &TeacherCache,
    data: &FeatureDataset,
    n_samples: usize,
    temperature: f64,
) -> Result<usize> {
    let before = cache.len();
    for r in data.records() {
        lalm_predict(
            provider,
            cache,
            &r.id,
            data.class_names(),
            n_samples,
            temperature,
        )?;
    }
    Ok(cache.len() - before)
}

static WARNED_NO_DROPOUT: AtomicBool = AtomicBool::new(false);

/// `n_passes` train-mode forwards with fresh dropout masks, softmaxed.
pub fn mc_dropout_predict<R: Rng + ?Sized>(
    teacher: &MlpClassifier,
    x: &[f64],
    n_passes: usize,
    rng: &mut R,
) -> Result<TeacherSampleSet> {
    if n_passes == 0 {
        return Err(Error::Validation("n_passes must be >= 1".into()));
    }
    if n_passes > 1
        && teacher.dropout_rate() == 0.0
        && !WARNED_NO_DROPOUT.swap(true, Ordering::Relaxed)
    {
        log::warn!("MC dropout with rate 0: all passes are identical and MI is 0");
    }
    let hidden = teacher.hidden_activation(x)?;
    let samples = (0..n_passes)
        .map(|_| {
            let mask = teacher.sample_dropout_mask(rng);
            softmax(&teacher.logits_from_hidden(&hidden, &mask))
        })
        .collect();
    TeacherSampleSet::from_samples(samples)
}

/// Exponential moving average of the student's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub teacher: MlpClassifier,
    pub alpha: f64,
}

impl EmaState {
    pub fn new(teacher: MlpClassifier, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Validation(format!(
                "EMA alpha {alpha} outside [0, 1)"
            )));
        }
        Ok(Self { teacher, alpha })
    }

    /// `θ_teacher ← α θ_teacher + (1 − α) θ_student`.
    pub fn update(&mut self, student: &MlpClassifier) -> Result<()> {
        if student.dims() != self.teacher.dims() {
            return Err(Error::Contract(format!(
                "EMA teacher is {:?}, student is {:?}",
                self.teacher.dims(),
                student.dims()
            )));
        }
        let alpha = self.alpha;
        for (t, &s) in self.teacher.params_mut().iter_mut().zip(student.params()) {
            *t = ema_blend(*t, s, alpha);
        }
        Ok(())
    }
}

/// One EMA step for a scalar, kept within `[min(t, s), max(t, s)]`.
pub fn ema_blend(teacher: f64, student: f64, alpha: f64) -> f64 {
    if teacher == student {
        return teacher;
    }
    let blended = alpha * teacher + (1.0 - alpha) * student;
    blended.clamp(teacher.min(student), teacher.max(student))
}
