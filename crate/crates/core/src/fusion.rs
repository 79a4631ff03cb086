//! Fusing the two teachers' sample sets into one soft label.
//!
//! A strategy is a `(generation, gate, weighting)` triple. `Direct` always
//! fuses the two mean distributions, `Kl(τ)` fuses only while the classifier
//! mean stays within `τ` nats of the provider mean and otherwise falls back
//! to the lower-entropy teacher, and `NoFusion` always takes the lower-entropy
//! teacher. Fusion weights are a softmax over `-MI` (or `-H(mean)`), or equal.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::{kl_divergence, ProbDist, TeacherSampleSet};

/// KL thresholds searched by the ablation.
pub const KL_TAU_GRID: [f64; 3] = [0.4, 0.6, 0.8];
const ENTROPY_TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generation {
    /// Several stochastic provider samples per input.
    Multi,
    /// One deterministic provider sample at temperature zero.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Gate {
    Direct,
    Kl { tau: f64 },
    NoFusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Mi,
    Entropy,
    Equal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub generation: Generation,
    pub gate: Gate,
    pub weighting: Weighting,
    /// Permit KL thresholds outside [`KL_TAU_GRID`].
    #[serde(default)]
    pub allow_free_tau: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::new(Generation::Multi, Gate::Direct, Weighting::Mi)
    }
}

impl FusionConfig {
    pub fn new(generation: Generation, gate: Gate, weighting: Weighting) -> Self {
        Self {
            generation,
            gate,
            weighting,
            allow_free_tau: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.generation == Generation::Single && self.weighting == Weighting::Mi {
            return Err(Error::Validation(
                "MI weighting is vacuous with single generation (one sample has MI 0)".into(),
            ));
        }
        if let Gate::Kl { tau } = self.gate {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Validation(format!(
                    "KL threshold {tau} must be positive"
                )));
            }
            if !self.allow_free_tau && !KL_TAU_GRID.contains(&tau) {
                return Err(Error::Validation(format!(
                    "KL threshold {tau} not in {KL_TAU_GRID:?} (set allow_free_tau to override)"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for FusionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let generation = match self.generation {
            Generation::Multi => "multi",
            Generation::Single => "single",
        };
        let weighting = match self.weighting {
            Weighting::Mi => "mi",
            Weighting::Entropy => "entropy",
            Weighting::Equal => "equal",
        };
        match self.gate {
            Gate::Direct => write!(f, "{generation}/direct/{weighting}"),
            Gate::Kl { tau } => write!(f, "{generation}/kl({tau})/{weighting}"),
            Gate::NoFusion => write!(f, "{generation}/no_fusion"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Fused,
    ClsOnly,
    LmOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedLabel {
    pub dist: ProbDist,
    pub source: LabelSource,
    /// `(w_cls, w_lm)`, present when the label was fused.
    pub weights: Option<(f64, f64)>,
}

/// Normalized weights for the two teachers.
pub fn fusion_weights(
    cls: &TeacherSampleSet,
    lm: &TeacherSampleSet,
    weighting: Weighting,
) -> (f64, f64) {
    match weighting {
        Weighting::Equal => (0.5, 0.5),
        Weighting::Mi => uncertainty_weights(cls.mutual_info(), lm.mutual_info()),
        Weighting::Entropy => uncertainty_weights(cls.entropy(), lm.entropy()),
    }
}

/// Softmax over `(-u_cls, -u_lm)`: weights proportional to `exp(-u)`.
pub fn uncertainty_weights(u_cls: f64, u_lm: f64) -> (f64, f64) {
    let m = u_cls.min(u_lm);
    let a = (-(u_cls - m)).exp();
    let b = (-(u_lm - m)).exp();
    (a / (a + b), b / (a + b))
}

/// `w_cls · cls + w_lm · lm`, each entry kept between the two inputs.
pub fn mix_means(cls: &ProbDist, lm: &ProbDist, (w_cls, w_lm): (f64, f64)) -> Result<ProbDist> {
    if cls.n_classes() != lm.n_classes() {
        return Err(Error::Shape(format!(
            "mixing {} and {} classes",
            cls.n_classes(),
            lm.n_classes()
        )));
    }
    let probs = cls
        .probs()
        .iter()
        .zip(lm.probs())
        .map(|(a, b)| {
            let v = w_cls * a + w_lm * b;
            v.clamp(a.min(*b), a.max(*b))
        })
        .collect();
    Ok(ProbDist::from_normalized(probs))
}

/// Combines the teachers under `config`.
pub fn fuse(
    cls: &TeacherSampleSet,
    lm: &TeacherSampleSet,
    config: &FusionConfig,
) -> Result<FusedLabel> {
    config.validate()?;
    if cls.n_classes() != lm.n_classes() {
        return Err(Error::Shape(format!(
            "classifier teacher has {} classes, provider teacher {}",
            cls.n_classes(),
            lm.n_classes()
        )));
    }
    let direct = || -> Result<FusedLabel> {
        let weights = fusion_weights(cls, lm, config.weighting);
        Ok(FusedLabel {
            dist: mix_means(cls.mean(), lm.mean(), weights)?,
            source: LabelSource::Fused,
            weights: Some(weights),
        })
    };
    match config.gate {
        Gate::Direct => direct(),
        Gate::Kl { tau } => {
            if kl_divergence(cls.mean(), lm.mean())? <= tau {
                direct()
            } else {
                Ok(select_lower_entropy(cls, lm))
            }
        }
        Gate::NoFusion => Ok(select_lower_entropy(cls, lm)),
    }
}

/// The mean of whichever teacher has lower entropy; ties go to the
/// classifier teacher.
pub fn select_lower_entropy(cls: &TeacherSampleSet, lm: &TeacherSampleSet) -> FusedLabel {
    if lm.entropy() < cls.entropy() - ENTROPY_TIE {
        FusedLabel {
            dist: lm.mean().clone(),
            source: LabelSource::LmOnly,
            weights: None,
        }
    } else {
        FusedLabel {
            dist: cls.mean().clone(),
            source: LabelSource::ClsOnly,
            weights: None,
        }
    }
}

/// One ablation cell. Kl cells carry no threshold; it is chosen per run from
/// [`KL_TAU_GRID`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub generation: Generation,
    pub gate: GateKind,
    /// `None` for `NoFusion`, which does not weight.
    pub weighting: Option<Weighting>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Direct,
    Kl,
    NoFusion,
}

impl AblationCell {
    /// Concrete configuration, with `tau` used for Kl cells.
    pub fn config(&self, tau: f64) -> FusionConfig {
        let gate = match self.gate {
            GateKind::Direct => Gate::Direct,
            GateKind::Kl => Gate::Kl { tau },
            GateKind::NoFusion => Gate::NoFusion,
        };
        // NoFusion ignores the weighting; any value valid for the generation works
        FusionConfig::new(
            self.generation,
            gate,
            self.weighting.unwrap_or(Weighting::Equal),
        )
    }

    pub fn label(&self) -> (String, String, String) {
        let g = match self.generation {
            Generation::Multi => "Multi",
            Generation::Single => "Single",
        };
        let s = match self.gate {
            GateKind::Direct => "Direct",
            GateKind::Kl => "KL",
            GateKind::NoFusion => "No Fusion",
        };
        let w = match self.weighting {
            None => "-",
            Some(Weighting::Mi) => "MI",
            Some(Weighting::Entropy) => "Entropy",
            Some(Weighting::Equal) => "Equal",
        };
        (g.into(), s.into(), w.into())
    }
}

/// Every valid strategy, in table order: seven multi-generation cells then
/// five single-generation cells.
pub fn ablation_cells() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for generation in [Generation::Multi, Generation::Single] {
        let weightings: &[Weighting] = match generation {
            Generation::Multi => &[Weighting::Mi, Weighting::Entropy, Weighting::Equal],
            Generation::Single => &[Weighting::Entropy, Weighting::Equal],
        };
        for gate in [GateKind::Direct, GateKind::Kl] {
            for &w in weightings {
                cells.push(AblationCell {
                    generation,
                    gate,
                    weighting: Some(w),
                });
            }
        }
        cells.push(AblationCell {
            generation,
            gate: GateKind::NoFusion,
            weighting: None,
        });
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::entropy;

    fn set(samples: &[&[f64]]) -> TeacherSampleSet {
        TeacherSampleSet::from_samples(
            samples
                .iter()
                .map(|s| ProbDist::new(s.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn direct(w: Weighting) -> FusionConfig {
        FusionConfig::new(Generation::Multi, Gate::Direct, w)
    }

    #[test]
    fn equal_mi_gives_simple_average() {
        let cls = set(&[&[0.6, 0.4]]);
        let lm = set(&[&[0.2, 0.8]]);
        let f = fuse(&cls, &lm, &direct(Weighting::Mi)).unwrap();
        assert_eq!(f.weights, Some((0.5, 0.5)));
        assert!((f.dist.probs()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn worked_mi_example() {
        let (w_cls, w_lm) = uncertainty_weights(0.0, 2f64.ln());
        assert!((w_cls - 2.0 / 3.0).abs() < 1e-12 && (w_lm - 1.0 / 3.0).abs() < 1e-12);
        let fused = mix_means(
            &ProbDist::new(vec![0.6, 0.4]).unwrap(),
            &ProbDist::new(vec![0.2, 0.8]).unwrap(),
            (w_cls, w_lm),
        )
        .unwrap();
        assert!((fused.probs()[0] - 0.46667).abs() < 1e-5);
        assert!((fused.probs()[1] - 0.53333).abs() < 1e-5);
    }

    #[test]
    fn mi_weights_follow_sample_disagreement() {
        let cls = set(&[&[0.6, 0.4], &[0.6, 0.4]]);
        let lm = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (w_cls, w_lm) = fusion_weights(&cls, &lm, Weighting::Mi);
        assert!((w_cls - 2.0 / 3.0).abs() < 1e-12 && (w_lm - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kl_gate_passes_identical_means() {
        let a = set(&[&[0.7, 0.2, 0.1], &[0.5, 0.3, 0.2]]);
        let cfg = FusionConfig::new(Generation::Multi, Gate::Kl { tau: 0.4 }, Weighting::Mi);
        let f = fuse(&a, &a.clone(), &cfg).unwrap();
        assert_eq!(f.source, LabelSource::Fused);
    }

    #[test]
    fn kl_gate_falls_back_to_lower_entropy() {
        let cls = set(&[&[0.98, 0.01, 0.01]]);
        let lm = set(&[&[0.01, 0.49, 0.5]]);
        let cfg = FusionConfig::new(Generation::Multi, Gate::Kl { tau: 0.4 }, Weighting::Mi);
        let f = fuse(&cls, &lm, &cfg).unwrap();
        assert_eq!(f.source, LabelSource::ClsOnly);
        assert_eq!(&f.dist, cls.mean());
    }

    #[test]
    fn no_fusion_prefers_one_hot() {
        let cls = set(&[&[1.0, 0.0, 0.0, 0.0]]);
        let lm = set(&[&[0.25; 4]]);
        let cfg = FusionConfig::new(Generation::Multi, Gate::NoFusion, Weighting::Mi);
        let f = fuse(&cls, &lm, &cfg).unwrap();
        assert_eq!(f.source, LabelSource::ClsOnly);
        let f = fuse(&lm, &cls, &cfg).unwrap();
        assert_eq!(f.source, LabelSource::LmOnly);
        assert_eq!(f.dist, ProbDist::one_hot(4, 0));
    }

    #[test]
    fn lower_entropy_examples() {
        let a = set(&[&[0.9, 0.1]]);
        let b = set(&[&[0.6, 0.4]]);
        assert!((entropy(a.mean()) - 0.325083).abs() < 1e-6);
        assert!((entropy(b.mean()) - 0.673012).abs() < 1e-6);
        assert_eq!(select_lower_entropy(&a, &b).source, LabelSource::ClsOnly);
        assert_eq!(select_lower_entropy(&b, &a).source, LabelSource::LmOnly);
        // exact tie, mirrored distributions
        let c = set(&[&[0.4, 0.6]]);
        assert_eq!(select_lower_entropy(&b, &c).source, LabelSource::ClsOnly);
    }

    #[test]
    fn validation_rules() {
        let single_mi = FusionConfig::new(Generation::Single, Gate::Direct, Weighting::Mi);
        assert!(single_mi.validate().is_err());
        let odd_tau = FusionConfig::new(Generation::Multi, Gate::Kl { tau: 0.5 }, Weighting::Mi);
        assert!(odd_tau.validate().is_err());
        let free = FusionConfig {
            allow_free_tau: true,
            ..odd_tau
        };
        assert!(free.validate().is_ok());
        let neg = FusionConfig {
            gate: Gate::Kl { tau: -1.0 },
            ..free
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = set(&[&[0.5, 0.5]]);
        let b = set(&[&[0.2, 0.3, 0.5]]);
        assert!(matches!(
            fuse(&a, &b, &direct(Weighting::Equal)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ablation_grid_has_twelve_valid_cells() {
        let cells = ablation_cells();
        assert_eq!(cells.len(), 12);
        let multi = cells
            .iter()
            .filter(|c| c.generation == Generation::Multi)
            .count();
        assert_eq!((multi, cells.len() - multi), (7, 5));
        for c in &cells {
            c.config(0.6).validate().unwrap();
        }
    }

    #[test]
    fn config_serializes_readably() {
        let cfg = FusionConfig::new(Generation::Multi, Gate::Kl { tau: 0.6 }, Weighting::Entropy);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(
            json,
            r#"{"generation":"multi","gate":{"kind":"kl","tau":0.6},"weighting":"entropy","allow_free_tau":false}"#
        );
        let back: FusionConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }
}
