//! Feature datasets, their line-delimited JSON format, stratified splits and
//! the synthetic domain-shift benchmark.
//!
//! File layout: the first line is `{"manifest": {...}}`, every following line
//! is one record `{"id": "...", "features": [...], "label": 2}` with `label`
//! omitted for unlabeled records. Features are a flat `[D]` array when the
//! manifest has one layer and `[[D] × L]` otherwise.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const DEFAULT_CLASS_NAMES: [&str; 4] = ["happy", "sad", "angry", "neutral"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    #[serde(default = "one")]
    pub layer_count: usize,
}

fn one() -> usize {
    1
}

impl Manifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Flat feature length `L × D`.
    pub fn input_len(&self) -> usize {
        self.feature_dim * self.layer_count
    }

    fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Validation(
                "manifest needs at least two classes".into(),
            ));
        }
        let unique: HashSet<_> = self.class_names.iter().collect();
        if unique.len() != self.class_names.len() {
            return Err(Error::Validation(
                "manifest class names are not unique".into(),
            ));
        }
        if self.feature_dim == 0 || self.layer_count == 0 {
            return Err(Error::Validation(
                "feature_dim and layer_count must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    /// Row-major `L × D` features.
    pub features: Vec<f64>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    manifest: Manifest,
    records: Vec<Record>,
}

impl FeatureDataset {
    pub fn new(manifest: Manifest, records: Vec<Record>) -> Result<Self> {
        manifest.validate()?;
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate record id {:?}", r.id)));
            }
            check_record(&manifest, r)?;
        }
        Ok(Self { manifest, records })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when every record carries a label (vacuously true when empty).
    pub fn is_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }

    /// Labels of all records; fails if any record is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.records
            .iter()
            .map(|r| {
                r.label
                    .ok_or_else(|| Error::Validation(format!("record {:?} has no label", r.id)))
            })
            .collect()
    }

    /// Same records with labels stripped.
    pub fn unlabeled(&self) -> Self {
        Self {
            manifest: self.manifest.clone(),
            records: self
                .records
                .iter()
                .map(|r| Record {
                    label: None,
                    ..r.clone()
                })
                .collect(),
        }
    }

    /// Records at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            manifest: self.manifest.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &serde_json::json!({ "manifest": self.manifest }))?;
        out.write_all(b"\n")?;
        let d = self.manifest.feature_dim;
        for r in &self.records {
            let features = if self.manifest.layer_count == 1 {
                serde_json::to_value(&r.features)?
            } else {
                let rows: Vec<&[f64]> = r.features.chunks_exact(d).collect();
                serde_json::to_value(rows)?
            };
            let mut obj = serde_json::Map::new();
            obj.insert("id".into(), Value::String(r.id.clone()));
            obj.insert("features".into(), features);
            if let Some(label) = r.label {
                obj.insert("label".into(), Value::from(label));
            }
            serde_json::to_writer(&mut out, &Value::Object(obj))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path.as_ref())?;
        self.write_to(BufWriter::new(file))
    }
}

fn check_record(manifest: &Manifest, r: &Record) -> Result<()> {
    if r.features.len() != manifest.input_len() {
        return Err(Error::Validation(format!(
            "record {:?} has {} feature values, manifest expects {} x {}",
            r.id,
            r.features.len(),
            manifest.layer_count,
            manifest.feature_dim
        )));
    }
    if r.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "record {:?} has non-finite features",
            r.id
        )));
    }
    if let Some(label) = r.label {
        if label >= manifest.n_classes() {
            return Err(Error::Validation(format!(
                "record {:?} has label {label}, only {} classes",
                r.id,
                manifest.n_classes()
            )));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct ManifestLine {
    manifest: Manifest,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    features: Value,
    #[serde(default)]
    label: Option<usize>,
}

/// Reads and validates a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_dataset(BufReader::new(file), path)
}

pub fn read_dataset<R: BufRead>(reader: R, origin: &Path) -> Result<FeatureDataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let manifest = loop {
        match lines.next() {
            None => return Err(parse_err(1, "missing manifest line".into())),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let m: ManifestLine =
                    serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
                m.manifest.validate()?;
                break m.manifest;
            }
        }
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        let features = flatten_features(&rec.features, &manifest)
            .map_err(|msg| parse_err(i + 1, format!("record {:?}: {msg}", rec.id)))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate record id {:?} at line {}",
                rec.id,
                i + 1
            )));
        }
        let record = Record {
            id: rec.id,
            features,
            label: rec.label,
        };
        check_record(&manifest, &record)?;
        records.push(record);
    }
    Ok(FeatureDataset { manifest, records })
}

fn flatten_features(value: &Value, manifest: &Manifest) -> std::result::Result<Vec<f64>, String> {
    let arr = value.as_array().ok_or("features must be an array")?;
    let numbers = |row: &[Value]| -> std::result::Result<Vec<f64>, String> {
        row.iter()
            .map(|v| v.as_f64().ok_or_else(|| format!("non-numeric feature {v}")))
            .collect()
    };
    let nested = arr.first().is_some_and(Value::is_array);
    if nested {
        if arr.len() != manifest.layer_count {
            return Err(format!(
                "{} feature layers, manifest declares {}",
                arr.len(),
                manifest.layer_count
            ));
        }
        let mut out = Vec::with_capacity(manifest.input_len());
        for row in arr {
            let row = row.as_array().ok_or("ragged feature layers")?;
            if row.len() != manifest.feature_dim {
                return Err(format!(
                    "feature row of length {}, manifest declares {}",
                    row.len(),
                    manifest.feature_dim
                ));
            }
            out.extend(numbers(row)?);
        }
        Ok(out)
    } else {
        if manifest.layer_count != 1 {
            return Err("flat features given for a multi-layer manifest".into());
        }
        if arr.len() != manifest.feature_dim {
            return Err(format!(
                "{} features, manifest declares {}",
                arr.len(),
                manifest.feature_dim
            ));
        }
        numbers(arr)
    }
}

/// Splits into `(train, dev, test)` by fractions, stratified by label when
/// the data is labeled. Within each stratum the counts follow largest
/// remainders, so every split is within one item of proportional.
pub fn split(
    dataset: &FeatureDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset, FeatureDataset)> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Validation(format!(
            "split fractions {fractions:?} must be non-negative"
        )));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    let mut strata: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    let stratify = dataset.is_labeled();
    for (i, r) in dataset.records.iter().enumerate() {
        let key = if stratify { r.label } else { None };
        strata.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (_, mut members) in strata {
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), &fractions);
        let mut start = 0;
        for (part, count) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    let [mut a, mut b, mut c] = parts;
    a.sort_unstable();
    b.sort_unstable();
    c.sort_unstable();
    Ok((dataset.subset(&a), dataset.subset(&b), dataset.subset(&c)))
}

fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).filter(|&i| fractions[i] > 0.0).collect();
    order.sort_by(|&i, &j| {
        let ri = exact[i] - exact[i].floor();
        let rj = exact[j] - exact[j].floor();
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Geometric shift applied to the source blobs to form the target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// Norm of the mean offset; the direction is random unless `offset` is set.
    pub offset_norm: f64,
    /// Explicit offset vector, overriding `offset_norm`.
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
    /// Rotation in degrees within a random 2-D subspace (the whole plane when D = 2).
    pub rotation_deg: f64,
    /// Multiplier on the within-class noise.
    pub noise_scale: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            offset_norm: 0.0,
            offset: None,
            rotation_deg: 0.0,
            noise_scale: 1.0,
        }
    }
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            offset_norm: 1.5,
            offset: None,
            rotation_deg: 25.0,
            noise_scale: 1.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthShiftSpec {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    /// Pairwise distance between class means.
    pub separation: f64,
    pub shift: ShiftSpec,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for SynthShiftSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            feature_dim: 16,
            samples_per_class: 500,
            separation: 3.0,
            shift: ShiftSpec::default(),
            class_names: None,
            seed: 0,
        }
    }
}

impl SynthShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Validation("n_classes must be >= 2".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Validation("feature_dim must be >= 2".into()));
        }
        if self.samples_per_class < 8 {
            return Err(Error::Validation("samples_per_class must be >= 8".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Validation("separation must be positive".into()));
        }
        let s = &self.shift;
        if !(s.noise_scale >= 0.0 && s.noise_scale.is_finite())
            || !s.offset_norm.is_finite()
            || !s.rotation_deg.is_finite()
        {
            return Err(Error::Validation(
                "shift parameters must be finite, noise_scale >= 0".into(),
            ));
        }
        if let Some(offset) = &s.offset {
            if offset.len() != self.feature_dim {
                return Err(Error::Validation(format!(
                    "offset has {} entries, feature_dim is {}",
                    offset.len(),
                    self.feature_dim
                )));
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.n_classes {
                return Err(Error::Validation(
                    "class_names length must equal n_classes".into(),
                ));
            }
        }
        Ok(())
    }

    fn resolved_class_names(&self) -> Vec<String> {
        match &self.class_names {
            Some(names) => names.clone(),
            None if self.n_classes == DEFAULT_CLASS_NAMES.len() => {
                DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
            }
            None => (0..self.n_classes).map(|c| format!("class{c}")).collect(),
        }
    }
}

/// Output of [`generate_synth_shift`].
#[derive(Debug, Clone)]
pub struct SynthShift {
    pub source: FeatureDataset,
    /// Target domain with labels, for evaluation only.
    pub target: FeatureDataset,
    /// The same target records without labels, for adaptation.
    pub target_unlabeled: FeatureDataset,
}

/// Gaussian class blobs in the source domain and a rotated, offset and
/// re-scaled copy of them as the target domain.
pub fn generate_synth_shift(spec: &SynthShiftSpec) -> Result<SynthShift> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, d) = (spec.n_classes, spec.feature_dim);

    let means = class_means(c, d, spec.separation, &mut rng);
    let (u, v) = rotation_plane(&means, d, &mut rng);
    let offset = match &spec.shift.offset {
        Some(o) => o.clone(),
        None => {
            let mut dir = gaussian_vec(d, &mut rng);
            normalize(&mut dir);
            dir.iter().map(|x| x * spec.shift.offset_norm).collect()
        }
    };
    let angle = spec.shift.rotation_deg.to_radians();

    let manifest = Manifest {
        class_names: spec.resolved_class_names(),
        feature_dim: d,
        layer_count: 1,
    };
    let mut source = Vec::with_capacity(c * spec.samples_per_class);
    let mut target = Vec::with_capacity(c * spec.samples_per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let x: Vec<f64> = mean.iter().map(|m| m + gauss(&mut rng)).collect();
            source.push((x, label));
        }
        for _ in 0..spec.samples_per_class {
            let noisy: Vec<f64> = mean
                .iter()
                .map(|m| m + spec.shift.noise_scale * gauss(&mut rng))
                .collect();
            let mut x = rotate(&noisy, &u, &v, angle);
            x.iter_mut().zip(&offset).for_each(|(a, o)| *a += o);
            target.push((x, label));
        }
    }
    source.shuffle(&mut rng);
    target.shuffle(&mut rng);
    let to_records = |items: Vec<(Vec<f64>, usize)>, prefix: &str| -> Vec<Record> {
        items
            .into_iter()
            .enumerate()
            .map(|(i, (features, label))| Record {
                id: format!("{prefix}-{i:05}"),
                features,
                label: Some(label),
            })
            .collect()
    };
    let source = FeatureDataset::new(manifest.clone(), to_records(source, "src"))?;
    let target = FeatureDataset::new(manifest, to_records(target, "tgt"))?;
    let target_unlabeled = target.unlabeled();
    Ok(SynthShift {
        source,
        target,
        target_unlabeled,
    })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| gauss(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Removes the components of `v` along each (orthonormal) basis vector and
/// normalizes the rest; `None` if nothing is left.
fn orthogonalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for b in basis {
        let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
    }
    if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
        normalize(&mut v);
        Some(v)
    } else {
        None
    }
}

fn orthonormal(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        if let Some(v) = orthogonalize(gaussian_vec(d, rng), &basis) {
            basis.push(v);
        }
    }
    basis
}

/// A random plane inside the span of the class means, so the rotation moves
/// the classes rather than directions the labels do not depend on. With a
/// one-dimensional span the plane pairs it with a random orthogonal direction.
fn rotation_plane(means: &[Vec<f64>], d: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    if d == 2 {
        return (vec![1.0, 0.0], vec![0.0, 1.0]);
    }
    let mut span: Vec<Vec<f64>> = Vec::new();
    for m in means {
        if let Some(v) = orthogonalize(m.clone(), &span) {
            span.push(v);
        }
    }
    let mut plane: Vec<Vec<f64>> = Vec::with_capacity(2);
    while plane.len() < 2 {
        let candidate = if span.len() >= 2 {
            let mut v = vec![0.0; d];
            for b in &span {
                let w = gauss(rng);
                v.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
            }
            v
        } else if plane.is_empty() && !span.is_empty() {
            span[0].clone()
        } else {
            gaussian_vec(d, rng)
        };
        if let Some(v) = orthogonalize(candidate, &plane) {
            plane.push(v);
        }
    }
    let v = plane.pop().expect("two vectors");
    (plane.pop().expect("two vectors"), v)
}

/// Centered simplex-like means with the requested pairwise distance (exact
/// when `D >= C`; for two classes the means are antipodal).
fn class_means(c: usize, d: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let directions = if d >= c {
        orthonormal(c, d, rng)
    } else {
        (0..c)
            .map(|_| {
                let mut v = gaussian_vec(d, rng);
                normalize(&mut v);
                v
            })
            .collect()
    };
    let mut centroid = vec![0.0; d];
    for dir in &directions {
        centroid
            .iter_mut()
            .zip(dir)
            .for_each(|(a, x)| *a += x / c as f64);
    }
    let scale = separation / std::f64::consts::SQRT_2;
    directions
        .into_iter()
        .map(|dir| {
            dir.iter()
                .zip(&centroid)
                .map(|(x, m)| (x - m) * scale)
                .collect()
        })
        .collect()
}

/// Rotates `x` by `angle` within the plane spanned by orthonormal `u`, `v`.
fn rotate(x: &[f64], u: &[f64], v: &[f64], angle: f64) -> Vec<f64> {
    let a: f64 = x.iter().zip(u).map(|(p, q)| p * q).sum();
    let b: f64 = x.iter().zip(v).map(|(p, q)| p * q).sum();
    let (s, c) = angle.sin_cos();
    let (a2, b2) = (c * a - s * b, s * a + c * b);
    x.iter()
        .zip(u.iter().zip(v))
        .map(|(xi, (ui, vi))| xi + (a2 - a) * ui + (b2 - b) * vi)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(c: usize, d: usize, l: usize) -> Manifest {
        Manifest {
            class_names: (0..c).map(|i| format!("c{i}")).collect(),
            feature_dim: d,
            layer_count: l,
        }
    }

    fn labeled(n_per_class: usize, c: usize) -> FeatureDataset {
        let records = (0..n_per_class * c)
            .map(|i| Record {
                id: format!("r{i}"),
                features: vec![i as f64, 0.5],
                label: Some(i % c),
            })
            .collect();
        FeatureDataset::new(manifest(c, 2, 1), records).unwrap()
    }

    #[test]
    fn empty_records_are_valid() {
        let ds = FeatureDataset::new(manifest(4, 3, 1), vec![]).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), Path::new("mem")).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.manifest(), ds.manifest());
    }

    #[test]
    fn duplicate_id_is_rejected_by_name() {
        let text = concat!(
            r#"{"manifest":{"class_names":["a","b"],"feature_dim":2,"layer_count":1}}"#,
            "\n",
            r#"{"id":"x1","features":[1,2],"label":0}"#,
            "\n",
            r#"{"id":"x1","features":[3,4]}"#,
            "\n"
        );
        let err = read_dataset(text.as_bytes(), Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("\"x1\""), "{err}");
    }

    #[test]
    fn ragged_rows_and_bad_json_report_line_numbers() {
        let text = concat!(
            r#"{"manifest":{"class_names":["a","b"],"feature_dim":2,"layer_count":2}}"#,
            "\n",
            r#"{"id":"x1","features":[[1,2],[3,4]]}"#,
            "\n",
            r#"{"id":"x2","features":[[1,2],[3]]}"#,
            "\n"
        );
        match read_dataset(text.as_bytes(), Path::new("mem")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        let text = "{\"manifest\":{\"class_names\":[\"a\",\"b\"],\"feature_dim\":1}}\n{oops\n";
        match read_dataset(text.as_bytes(), Path::new("mem")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let r = Record {
            id: "a".into(),
            features: vec![0.0, 0.0],
            label: Some(2),
        };
        assert!(FeatureDataset::new(manifest(2, 2, 1), vec![r]).is_err());
    }

    #[test]
    fn split_all_to_train() {
        let ds = labeled(5, 4);
        let (train, dev, test) = split(&ds, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(train.len(), 20);
        assert!(dev.is_empty() && test.is_empty());
    }

    #[test]
    fn split_is_stratified_within_one() {
        let ds = labeled(25, 4);
        let (train, dev, test) = split(&ds, [0.8, 0.1, 0.1], 3).unwrap();
        for (part, frac) in [(&train, 0.8), (&dev, 0.1), (&test, 0.1)] {
            let mut hist = [0usize; 4];
            part.labels()
                .unwrap()
                .into_iter()
                .for_each(|l| hist[l] += 1);
            for h in hist {
                assert!((h as f64 - 25.0 * frac).abs() <= 1.0, "{hist:?}");
            }
        }
        let mut ids: Vec<_> = [&train, &dev, &test]
            .iter()
            .flat_map(|p| p.records().iter().map(|r| r.id.clone()))
            .collect();
        ids.sort();
        let mut all: Vec<_> = ds.records().iter().map(|r| r.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
        assert_eq!(split(&ds, [0.8, 0.1, 0.1], 3).unwrap().1, dev);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = labeled(2, 2);
        assert!(split(&ds, [0.5, 0.5, 0.5], 0).is_err());
        assert!(split(&ds, [1.2, -0.2, 0.0], 0).is_err());
    }

    #[test]
    fn synth_means_have_requested_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let means = class_means(4, 16, 3.0, &mut rng);
        for i in 0..4 {
            for j in i + 1..4 {
                let dist: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((dist - 3.0).abs() < 1e-9);
            }
        }
        let two = class_means(2, 2, 4.0, &mut rng);
        assert!((two[0][0] + two[1][0]).abs() < 1e-12 && (two[0][1] + two[1][1]).abs() < 1e-12);
    }

    #[test]
    fn rotation_preserves_norm_and_flips_at_180() {
        let x = [1.0, 2.0];
        let r = rotate(&x, &[1.0, 0.0], &[0.0, 1.0], std::f64::consts::PI);
        assert!((r[0] + 1.0).abs() < 1e-12 && (r[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn synth_generation_is_deterministic_and_valid() {
        let spec = SynthShiftSpec {
            samples_per_class: 10,
            ..SynthShiftSpec::default()
        };
        let a = generate_synth_shift(&spec).unwrap();
        let b = generate_synth_shift(&spec).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert_eq!(a.source.len(), 40);
        assert!(a
            .target_unlabeled
            .records()
            .iter()
            .all(|r| r.label.is_none()));
        assert_eq!(a.source.class_names()[0], "happy");
        let bad = SynthShiftSpec {
            samples_per_class: 4,
            ..spec
        };
        assert!(generate_synth_shift(&bad).is_err());
    }
}
