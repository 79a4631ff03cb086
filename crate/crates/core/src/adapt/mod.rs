//! Source training and student adaptation.
//!
//! Each adaptation step draws a batch of target inputs, builds a soft label
//! per input from the teachers (Monte Carlo dropout passes over the EMA
//! teacher, cached provider samples), and trains the student on
//! `CE(student, label) + λ_div · (−H(batch-mean prediction))`. After the
//! AdamW step the EMA teacher moves toward the student. Training stops once
//! the per-step loss has gone `plateau_patience_steps` steps without a new
//! strict minimum, and the student from the best-loss step is returned.

mod ablation;
mod losses;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::FeatureDataset;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, MetricRecord};
use crate::fusion::{fuse, FusionConfig, Generation};
use crate::numkit::{softmax, AdamWState, Dims, Gradients, MlpClassifier, DEFAULT_HIDDEN};
use crate::teachers::{lalm_predict, mc_dropout_predict, EmaState, LalmProvider, TeacherCache};
use crate::uncertainty::{ProbDist, TeacherSampleSet};

pub use ablation::{run_ablation, AblationOutcome, AblationRow, TauTrial};
pub use losses::{adaptation_objective, diversity_loss, soft_cross_entropy};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the student's soft labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabels {
    /// Fuse both teachers according to the [`FusionConfig`].
    Fused,
    /// Classifier (EMA) teacher only.
    ClassifierOnly,
    /// Provider teacher only.
    ProviderOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub batch_size: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub teacher_lr: f64,
    /// Learning rate of a single adaptation run.
    pub student_lr: f64,
    pub student_lr_grid: Vec<f64>,
    pub plateau_patience_steps: u64,
    /// Hard cap on optimizer steps per run.
    pub max_steps: u64,
    pub alpha_ema: f64,
    pub lambda_div: f64,
    pub n_lm: usize,
    pub n_cls: usize,
    pub lalm_temperature: f64,
    pub pseudo_labels: PseudoLabels,
    pub dev_interval: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            dropout: 0.4,
            weight_decay: 0.1,
            hidden_dim: DEFAULT_HIDDEN,
            teacher_lr: 5e-4,
            student_lr: 5e-4,
            student_lr_grid: vec![7.5e-4, 5e-4, 1e-4, 5e-5, 1e-6],
            plateau_patience_steps: 1000,
            max_steps: 20_000,
            alpha_ema: 0.999,
            lambda_div: 1.0,
            n_lm: 5,
            n_cls: 8,
            lalm_temperature: 0.6,
            pseudo_labels: PseudoLabels::Fused,
            dev_interval: 100,
            checkpoint_interval: 500,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("teacher_lr", self.teacher_lr)?;
        positive("student_lr", self.student_lr)?;
        for &lr in &self.student_lr_grid {
            positive("student_lr_grid entry", lr)?;
        }
        positive("lalm_temperature", self.lalm_temperature)?;
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Validation("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.alpha_ema) {
            return Err(Error::Validation(format!(
                "alpha_ema {} outside [0, 1)",
                self.alpha_ema
            )));
        }
        if !(self.lambda_div >= 0.0 && self.lambda_div.is_finite()) {
            return Err(Error::Validation("lambda_div must be >= 0".into()));
        }
        let counts = [
            ("batch_size", self.batch_size as u64),
            ("hidden_dim", self.hidden_dim as u64),
            ("n_lm", self.n_lm as u64),
            ("n_cls", self.n_cls as u64),
            ("plateau_patience_steps", self.plateau_patience_steps),
            ("max_steps", self.max_steps),
            ("dev_interval", self.dev_interval),
            ("checkpoint_interval", self.checkpoint_interval),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// What [`PlateauTracker::observe`] concluded about one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauSignal {
    NewBest,
    Continue,
    Stop,
}

/// Patience counter over a loss sequence: a strictly smaller loss resets it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauTracker {
    patience: u64,
    best: Option<(u64, f64)>,
    steps_since_best: u64,
}

impl PlateauTracker {
    pub fn new(patience: u64) -> Self {
        Self {
            patience,
            best: None,
            steps_since_best: 0,
        }
    }

    pub fn observe(&mut self, step: u64, loss: f64) -> PlateauSignal {
        match self.best {
            Some((_, best)) if loss >= best || loss.is_nan() => {
                self.steps_since_best += 1;
                if self.steps_since_best >= self.patience {
                    PlateauSignal::Stop
                } else {
                    PlateauSignal::Continue
                }
            }
            _ => {
                self.best = Some((step, loss));
                self.steps_since_best = 0;
                PlateauSignal::NewBest
            }
        }
    }

    pub fn best_step(&self) -> Option<u64> {
        self.best.map(|(s, _)| s)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }

    pub fn steps_since_best(&self) -> u64 {
        self.steps_since_best
    }
}

/// Endless shuffled pass over `0..n`, reshuffling at each epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    pub fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.order.len();
        let b = batch_size.min(n);
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor == n {
                self.order.sort_unstable();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let take = (b - out.len()).min(n - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Result of [`train_source`].
#[derive(Debug, Clone)]
pub struct SourceFit {
    /// Parameters at the best-loss step.
    pub model: MlpClassifier,
    pub best_step: u64,
    pub steps: u64,
    /// Per-step mean batch loss.
    pub losses: Vec<f64>,
}

/// Trains the classifier teacher on labeled source data with hard-label
/// cross-entropy.
pub fn train_source(data: &FeatureDataset, config: &AdaptConfig, seed: u64) -> Result<SourceFit> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("source dataset is empty".into()));
    }
    let labels = data.labels()?;
    let c = data.n_classes();
    let mut support = vec![0usize; c];
    labels.iter().for_each(|&y| support[y] += 1);
    if let Some(missing) = support.iter().position(|&s| s == 0) {
        return Err(Error::Validation(format!(
            "class {:?} has no source samples",
            data.class_names()[missing]
        )));
    }
    let m = data.manifest();
    let dims = Dims::new(m.feature_dim, config.hidden_dim, c).with_layers(m.layer_count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpClassifier::new(dims, config.dropout, &mut rng)?;
    let mut optimizer = AdamWState::new(dims.n_params(), config.weight_decay);
    let mut grads = Gradients::zeros(dims);
    let mut sampler = BatchSampler::new(data.len());
    let mut plateau = PlateauTracker::new(config.plateau_patience_steps);
    let mut best = model.clone();
    let mut losses = Vec::new();

    for step in 0..config.max_steps {
        let batch = sampler.next_batch(config.batch_size, &mut rng);
        let scale = 1.0 / batch.len() as f64;
        grads.clear();
        let mut loss = 0.0;
        for &i in &batch {
            let (logits, cache) = model.forward_train(&data.records()[i].features, &mut rng)?;
            let (l, mut g) = soft_cross_entropy(&logits, &ProbDist::one_hot(c, labels[i]));
            loss += l * scale;
            g.iter_mut().for_each(|v| *v *= scale);
            model.backward_into(&cache, &g, &mut grads)?;
        }
        losses.push(loss);
        let signal = plateau.observe(step, loss);
        if signal == PlateauSignal::NewBest {
            best.clone_from(&model);
        }
        if signal == PlateauSignal::Stop {
            break;
        }
        optimizer.step(model.params_mut(), grads.values(), config.teacher_lr)?;
    }
    Ok(SourceFit {
        model: best,
        best_step: plateau.best_step().unwrap_or(0),
        steps: losses.len() as u64,
        losses,
    })
}

/// The provider teacher together with its caches: `sampled` holds draws at
/// the configured temperature, `greedy` holds temperature-zero answers.
#[derive(Clone, Copy)]
pub struct ProviderTeacher<'a> {
    pub provider: &'a dyn LalmProvider,
    pub sampled: &'a TeacherCache,
    pub greedy: &'a TeacherCache,
}

impl<'a> ProviderTeacher<'a> {
    /// Provider sample sets for every record, cache first.
    pub fn sample_sets(
        &self,
        data: &FeatureDataset,
        generation: Generation,
        config: &AdaptConfig,
    ) -> Result<Vec<TeacherSampleSet>> {
        let (cache, n, temperature) = match generation {
            Generation::Multi => (self.sampled, config.n_lm, config.lalm_temperature),
            Generation::Single => (self.greedy, 1, 0.0),
        };
        data.records()
            .iter()
            .map(|r| {
                lalm_predict(
                    self.provider,
                    cache,
                    &r.id,
                    data.class_names(),
                    n,
                    temperature,
                )
            })
            .collect()
    }
}

/// Mutable state of an adaptation run; everything needed to resume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptState {
    pub student: MlpClassifier,
    pub ema_teacher: EmaState,
    pub optimizer: AdamWState,
    /// Steps completed so far.
    pub step: u64,
    pub plateau: PlateauTracker,
    pub best_student: MlpClassifier,
    pub metric_log: Vec<MetricRecord>,
    pub stopped: bool,
    rng: ChaCha8Rng,
    sampler: BatchSampler,
}

impl AdaptState {
    fn new(source: &MlpClassifier, target_len: usize, config: &AdaptConfig) -> Result<Self> {
        let mut student = source.clone();
        student.set_dropout_rate(config.dropout)?;
        let ema_teacher = EmaState::new(student.clone(), config.alpha_ema)?;
        Ok(Self {
            optimizer: AdamWState::new(student.params().len(), config.weight_decay),
            best_student: student.clone(),
            ema_teacher,
            student,
            step: 0,
            plateau: PlateauTracker::new(config.plateau_patience_steps),
            metric_log: Vec::new(),
            stopped: false,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            sampler: BatchSampler::new(target_len),
        })
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.plateau.best_loss()
    }

    pub fn steps_since_best(&self) -> u64 {
        self.plateau.steps_since_best()
    }
}

/// Versioned on-disk snapshot of an adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptCheckpoint {
    pub version: u32,
    pub config: AdaptConfig,
    pub fusion: FusionConfig,
    pub state: AdaptState,
}

impl AdaptCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Self = serde_json::from_slice(&fs::read(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

/// Optional inputs of [`adapt_student`].
#[derive(Default)]
pub struct AdaptOptions<'a> {
    /// Labeled dev data; its unweighted accuracy is logged every `dev_interval` steps.
    pub dev: Option<&'a FeatureDataset>,
    /// Written every `checkpoint_interval` steps and at the end.
    pub checkpoint_path: Option<&'a Path>,
    pub resume: Option<AdaptCheckpoint>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    /// Student parameters at the best-loss step.
    pub student: MlpClassifier,
    pub state: AdaptState,
}

/// Adapts a student, initialized from `source_model`, to `target` (labels,
/// if any, are ignored).
pub fn adapt_student(
    target: &FeatureDataset,
    source_model: &MlpClassifier,
    provider: &ProviderTeacher<'_>,
    fusion: &FusionConfig,
    config: &AdaptConfig,
    options: AdaptOptions<'_>,
) -> Result<AdaptOutcome> {
    config.validate()?;
    fusion.validate()?;
    if target.is_empty() {
        return Err(Error::Validation("target dataset is empty".into()));
    }
    let c = target.n_classes();
    if source_model.dims().classes != c {
        return Err(Error::Shape(format!(
            "source model predicts {} classes, target manifest has {c}",
            source_model.dims().classes
        )));
    }
    if let Some(dev) = options.dev {
        if dev.class_names() != target.class_names() {
            return Err(Error::Validation(
                "dev and target manifests name different classes".into(),
            ));
        }
        dev.labels()?;
    }

    let provider_sets = match config.pseudo_labels {
        PseudoLabels::ClassifierOnly => None,
        _ => Some(provider.sample_sets(target, fusion.generation, config)?),
    };

    let mut state = match options.resume {
        Some(ckpt) => {
            if ckpt.config != *config || ckpt.fusion != *fusion {
                return Err(Error::Validation(
                    "checkpoint was written with a different configuration".into(),
                ));
            }
            ckpt.state
        }
        None => AdaptState::new(source_model, target.len(), config)?,
    };
    let save = |state: &AdaptState| -> Result<()> {
        if let Some(path) = options.checkpoint_path {
            AdaptCheckpoint {
                version: CHECKPOINT_VERSION,
                config: config.clone(),
                fusion: *fusion,
                state: state.clone(),
            }
            .save(path)?;
        }
        Ok(())
    };

    let dims = state.student.dims();
    let mut grads = Gradients::zeros(dims);
    while !state.stopped && state.step < config.max_steps {
        let step = state.step;
        let dev_ua = match options.dev {
            Some(dev) if step % config.dev_interval == 0 => {
                Some(evaluate(&state.student, dev)?.unweighted_accuracy)
            }
            _ => None,
        };

        let batch = state.sampler.next_batch(config.batch_size, &mut state.rng);
        let mut targets = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for &i in &batch {
            let x = &target.records()[i].features;
            let label = match (config.pseudo_labels, &provider_sets) {
                (PseudoLabels::ProviderOnly, Some(sets)) => sets[i].mean().clone(),
                (PseudoLabels::ClassifierOnly, _) => {
                    mc_dropout_predict(&state.ema_teacher.teacher, x, config.n_cls, &mut state.rng)?
                        .mean()
                        .clone()
                }
                (_, Some(sets)) => {
                    let cls = mc_dropout_predict(
                        &state.ema_teacher.teacher,
                        x,
                        config.n_cls,
                        &mut state.rng,
                    )?;
                    fuse(&cls, &sets[i], fusion)?.dist
                }
                (_, None) => unreachable!("provider sets are built for every provider-backed mode"),
            };
            targets.push(label);
            let (z, cache) = state.student.forward_train(x, &mut state.rng)?;
            logits.push(z);
            caches.push(cache);
        }
        let (loss, grad_logits) = adaptation_objective(&logits, &targets, config.lambda_div);

        grads.clear();
        for (cache, g) in caches.iter().zip(&grad_logits) {
            state.student.backward_into(cache, g, &mut grads)?;
        }
        state.metric_log.push(MetricRecord { step, loss, dev_ua });
        match state.plateau.observe(step, loss) {
            PlateauSignal::NewBest => state.best_student.clone_from(&state.student),
            PlateauSignal::Stop => state.stopped = true,
            PlateauSignal::Continue => {}
        }
        if !state.stopped {
            state.optimizer.step(
                state.student.params_mut(),
                grads.values(),
                config.student_lr,
            )?;
            state.ema_teacher.update(&state.student)?;
        }
        state.step += 1;
        if state.step % config.checkpoint_interval == 0 {
            save(&state)?;
        }
    }
    state.stopped = true;
    save(&state)?;
    log::debug!(
        "adaptation finished after {} steps, best loss {:?} at step {:?}",
        state.step,
        state.plateau.best_loss(),
        state.plateau.best_step()
    );
    Ok(AdaptOutcome {
        student: state.best_student.clone(),
        state,
    })
}

/// One run of an lr scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrRun {
    pub lr: f64,
    pub dev_ua: f64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct LrScanOutcome {
    pub best_lr: f64,
    pub student: MlpClassifier,
    pub runs: Vec<LrRun>,
}

/// Index of the run with the highest dev accuracy; ties go to the smaller lr.
pub fn select_lr(runs: &[LrRun]) -> Option<usize> {
    (0..runs.len()).reduce(|best, i| {
        let (a, b) = (&runs[best], &runs[i]);
        if b.dev_ua > a.dev_ua || (b.dev_ua == a.dev_ua && b.lr < a.lr) {
            i
        } else {
            best
        }
    })
}

/// Runs [`adapt_student`] once per learning rate with identical seeds and
/// keeps the student with the best final dev unweighted accuracy.
pub fn lr_scan(
    grid: &[f64],
    target: &FeatureDataset,
    source_model: &MlpClassifier,
    provider: &ProviderTeacher<'_>,
    fusion: &FusionConfig,
    config: &AdaptConfig,
    dev: Option<&FeatureDataset>,
) -> Result<LrScanOutcome> {
    let dev = dev.ok_or_else(|| Error::Validation("lr scan needs a labeled dev set".into()))?;
    if grid.is_empty() {
        return Err(Error::Validation("learning-rate grid is empty".into()));
    }
    let mut runs = Vec::with_capacity(grid.len());
    let mut students = Vec::with_capacity(grid.len());
    for &lr in grid {
        let cfg = AdaptConfig {
            student_lr: lr,
            ..config.clone()
        };
        let out = adapt_student(
            target,
            source_model,
            provider,
            fusion,
            &cfg,
            AdaptOptions {
                dev: Some(dev),
                ..AdaptOptions::default()
            },
        )?;
        let dev_ua = evaluate(&out.student, dev)?.unweighted_accuracy;
        log::info!("lr {lr}: dev UA {dev_ua:.4} after {} steps", out.state.step);
        runs.push(LrRun {
            lr,
            dev_ua,
            steps: out.state.step,
        });
        students.push(out.student);
    }
    let best = select_lr(&runs).expect("grid is nonempty");
    Ok(LrScanOutcome {
        best_lr: runs[best].lr,
        student: students.swap_remove(best),
        runs,
    })
}

/// Convenience used by zero-shot baselines: the provider's own argmax
/// predictions over a dataset.
pub fn provider_predictions(sets: &[TeacherSampleSet]) -> Vec<usize> {
    sets.iter().map(|s| s.mean().argmax()).collect()
}

/// Eval-mode class probabilities for one input.
pub fn predict_proba(model: &MlpClassifier, x: &[f64]) -> Result<ProbDist> {
    Ok(softmax(&model.forward_eval(x)?.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_stops_exactly_after_patience() {
        let mut p = PlateauTracker::new(1000);
        let mut stop = None;
        for step in 0..5000u64 {
            let loss = if step < 999 {
                10.0 - step as f64 * 0.01
            } else {
                5.0
            };
            if p.observe(step, loss) == PlateauSignal::Stop {
                stop = Some(step);
                break;
            }
        }
        assert_eq!(p.best_step(), Some(998));
        assert_eq!(stop, Some(998 + 1000));
    }

    #[test]
    fn plateau_resets_only_on_strict_improvement() {
        let mut p = PlateauTracker::new(3);
        assert_eq!(p.observe(0, 1.0), PlateauSignal::NewBest);
        assert_eq!(p.observe(1, 1.0), PlateauSignal::Continue);
        assert_eq!(p.steps_since_best(), 1);
        assert_eq!(p.observe(2, 0.5), PlateauSignal::NewBest);
        assert_eq!(p.steps_since_best(), 0);
        assert_eq!(p.observe(3, f64::NAN), PlateauSignal::Continue);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = BatchSampler::new(10);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(4, &mut rng)).collect();
        assert_eq!(seen.len(), 20);
        seen.truncate(10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(BatchSampler::new(3).next_batch(32, &mut rng).len(), 3);
    }

    #[test]
    fn lr_selection_tie_breaks_to_smaller() {
        let run = |lr, dev_ua| LrRun {
            lr,
            dev_ua,
            steps: 1,
        };
        assert_eq!(select_lr(&[run(1e-4, 0.5)]), Some(0));
        assert_eq!(
            select_lr(&[run(5e-4, 0.7), run(1e-4, 0.7), run(5e-5, 0.6)]),
            Some(1)
        );
        assert_eq!(select_lr(&[run(5e-4, 0.6), run(1e-4, 0.7)]), Some(1));
        assert_eq!(select_lr(&[]), None);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = AdaptConfig::default();
        assert_eq!((c.batch_size, c.n_lm, c.n_cls), (32, 5, 8));
        assert_eq!((c.dropout, c.weight_decay, c.alpha_ema), (0.4, 0.1, 0.999));
        assert_eq!((c.lambda_div, c.lalm_temperature), (1.0, 0.6));
        assert_eq!(c.plateau_patience_steps, 1000);
        c.validate().unwrap();
        assert!(AdaptConfig {
            alpha_ema: 1.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(AdaptConfig {
            batch_size: 0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(AdaptConfig {
            lambda_div: -1.0,
            ..c
        }
        .validate()
        .is_err());
    }
}
