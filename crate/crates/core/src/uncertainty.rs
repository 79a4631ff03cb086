//! Categorical distributions and the uncertainty measures computed over
//! sets of stochastic predictions.
//!
//! All logarithms are natural, so entropies and mutual information are in
//! nats. Entropy uses the exact `0 · ln 0 = 0` convention; only the KL
//! divergence floors its denominator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sums further than this from one are rejected outright.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;
/// Floor applied to `q` inside [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;
/// Slack below zero tolerated before mutual information is clamped.
pub const MI_SLACK: f64 = 1e-9;

/// A categorical distribution over `C` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    /// Validates and, if the sum is off by at most [`RENORMALIZE_TOLERANCE`],
    /// renormalizes. Sums already equal to one up to rounding are kept
    /// bit-for-bit so that cached values replay exactly.
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("distribution has no classes".into()));
        }
        for (i, p) in probs.iter_mut().enumerate() {
            if !p.is_finite() {
                return Err(Error::Input(format!("probability {i} is not finite")));
            }
            if *p < 0.0 {
                if *p < -1e-12 {
                    return Err(Error::Input(format!("probability {i} is negative ({p})")));
                }
                *p = 0.0;
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(Error::Input(format!(
                "probabilities sum to {sum}, too far from 1 to renormalize"
            )));
        }
        if (sum - 1.0).abs() > 4.0 * f64::EPSILON * probs.len() as f64 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_classes: usize) -> Self {
        assert!(
            n_classes > 0,
            "uniform distribution needs at least one class"
        );
        Self {
            probs: vec![1.0 / n_classes as f64; n_classes],
        }
    }

    pub fn one_hot(n_classes: usize, class: usize) -> Self {
        assert!(
            class < n_classes,
            "class {class} out of range for {n_classes}"
        );
        let mut probs = vec![0.0; n_classes];
        probs[class] = 1.0;
        Self { probs }
    }

    /// For values produced by code paths that normalize by construction.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!(
            (probs.iter().sum::<f64>() - 1.0).abs() < 1e-6,
            "unnormalized distribution {probs:?}"
        );
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(p: ProbDist) -> Self {
        p.probs
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats, `0 · ln 0 = 0`.
pub fn entropy(p: &ProbDist) -> f64 {
    entropy_of(p.probs())
}

pub(crate) fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Entrywise arithmetic mean of `K ≥ 1` distributions.
pub fn mean_dist(samples: &[ProbDist]) -> Result<ProbDist> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Input("mean of an empty sample set".into()))?;
    let c = first.n_classes();
    let mut acc = vec![0.0; c];
    for s in samples {
        if s.n_classes() != c {
            return Err(Error::Shape(format!(
                "sample set mixes {c} and {} classes",
                s.n_classes()
            )));
        }
        acc.iter_mut().zip(s.probs()).for_each(|(a, p)| *a += p);
    }
    let k = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(ProbDist::from_normalized(acc))
}

/// Epistemic uncertainty: entropy of the mean minus the mean entropy.
pub fn mutual_information(samples: &[ProbDist]) -> Result<f64> {
    let mean = mean_dist(samples)?;
    Ok(mutual_information_with_mean(samples, &mean))
}

fn mutual_information_with_mean(samples: &[ProbDist], mean: &ProbDist) -> f64 {
    let expected = samples.iter().map(entropy).sum::<f64>() / samples.len() as f64;
    let mi = entropy(mean) - expected;
    debug_assert!(mi >= -MI_SLACK, "mutual information {mi} below slack");
    mi.max(0.0)
}

/// `D_KL(p ‖ q)` in nats with `q` floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.n_classes() != q.n_classes() {
        return Err(Error::Shape(format!(
            "KL between {} and {} classes",
            p.n_classes(),
            q.n_classes()
        )));
    }
    let kl = p
        .probs()
        .iter()
        .zip(q.probs())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// `K` stochastic predictions from one teacher for one input, with the
/// derived mean distribution and mutual information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSampleSet {
    samples: Vec<ProbDist>,
    mean: ProbDist,
    mutual_info: f64,
}

impl TeacherSampleSet {
    pub fn from_samples(samples: Vec<ProbDist>) -> Result<Self> {
        let mean = mean_dist(&samples)?;
        let mutual_info = mutual_information_with_mean(&samples, &mean);
        Ok(Self {
            samples,
            mean,
            mutual_info,
        })
    }

    pub fn samples(&self) -> &[ProbDist] {
        &self.samples
    }

    pub fn mean(&self) -> &ProbDist {
        &self.mean
    }

    pub fn mutual_info(&self) -> f64 {
        self.mutual_info
    }

    pub fn n_classes(&self) -> usize {
        self.mean.n_classes()
    }

    /// Entropy of the mean distribution (total predictive uncertainty).
    pub fn entropy(&self) -> f64 {
        entropy(&self.mean)
    }
}
