//! Dense two-transform classifier with dropout, exact gradients and AdamW.
//!
//! Parameters live in one flat buffer so that the optimizer, the EMA teacher
//! and checkpoints can treat them uniformly. The layout is
//! `[layer_logits (L, only when L > 1) | w1 (H×D) | b1 (H) | w2 (C×H) | b2 (C)]`
//! with both matrices row-major.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::ProbDist;

/// Default hidden width.
pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Feature dimension `D` of one input layer.
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Number of stacked input layers `L` combined by a learned weighted sum.
    pub layers: usize,
}

impl Dims {
    pub fn new(input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input,
            hidden,
            classes,
            layers: 1,
        }
    }

    pub fn with_layers(self, layers: usize) -> Self {
        Self { layers, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.layers == 0 || self.classes < 2 {
            return Err(Error::Validation(format!(
                "invalid classifier dims {self:?}: need D, H, L >= 1 and C >= 2"
            )));
        }
        Ok(())
    }

    /// Flat input length `L × D`.
    pub fn input_len(&self) -> usize {
        self.layers * self.input
    }

    fn layout(&self) -> Layout {
        let mix = if self.layers > 1 { self.layers } else { 0 };
        let w1 = mix..mix + self.hidden * self.input;
        let b1 = w1.end..w1.end + self.hidden;
        let w2 = b1.end..b1.end + self.classes * self.hidden;
        let b2 = w2.end..w2.end + self.classes;
        Layout {
            mix: 0..mix,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().b2.end
    }
}

#[derive(Debug, Clone)]
struct Layout {
    mix: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Feed-forward classifier: softmax-weighted layer sum, affine, relu,
/// inverted dropout, affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawClassifier")]
pub struct MlpClassifier {
    dims: Dims,
    dropout_rate: f64,
    params: Vec<f64>,
}

#[derive(Deserialize)]
struct RawClassifier {
    dims: Dims,
    dropout_rate: f64,
    params: Vec<f64>,
}

impl TryFrom<RawClassifier> for MlpClassifier {
    type Error = Error;

    fn try_from(raw: RawClassifier) -> Result<Self> {
        Self::from_flat(raw.dims, raw.dropout_rate, raw.params)
    }
}

impl MlpClassifier {
    /// Glorot-uniform weights, zero biases, uniform layer mix.
    pub fn new<R: Rng + ?Sized>(dims: Dims, dropout_rate: f64, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(dims, dropout_rate)?;
        let layout = dims.layout();
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let a1 = glorot(dims.input, dims.hidden);
        for w in &mut model.params[layout.w1] {
            *w = rng.random_range(-a1..=a1);
        }
        let a2 = glorot(dims.hidden, dims.classes);
        for w in &mut model.params[layout.w2] {
            *w = rng.random_range(-a2..=a2);
        }
        Ok(model)
    }

    pub fn zeros(dims: Dims, dropout_rate: f64) -> Result<Self> {
        dims.validate()?;
        validate_rate(dropout_rate)?;
        Ok(Self {
            dims,
            dropout_rate,
            params: vec![0.0; dims.n_params()],
        })
    }

    pub fn from_flat(dims: Dims, dropout_rate: f64, params: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        validate_rate(dropout_rate)?;
        if params.len() != dims.n_params() {
            return Err(Error::Shape(format!(
                "{} parameters given, dims {dims:?} need {}",
                params.len(),
                dims.n_params()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Input(format!("parameter {i} is not finite")));
        }
        Ok(Self {
            dims,
            dropout_rate,
            params,
        })
    }

    /// Builds a single-layer-input model (`L = 1`) from explicit matrices.
    pub fn from_parts(
        w1: &[Vec<f64>],
        b1: &[f64],
        w2: &[Vec<f64>],
        b2: &[f64],
        dropout_rate: f64,
    ) -> Result<Self> {
        let hidden = w1.len();
        let input = w1.first().map_or(0, Vec::len);
        let dims = Dims::new(input, hidden, w2.len());
        if w1.iter().any(|r| r.len() != input) || w2.iter().any(|r| r.len() != hidden) {
            return Err(Error::Shape("ragged weight matrix".into()));
        }
        let mut params = Vec::with_capacity(dims.n_params());
        params.extend(w1.iter().flatten());
        params.extend_from_slice(b1);
        params.extend(w2.iter().flatten());
        params.extend_from_slice(b2);
        Self::from_flat(dims, dropout_rate, params)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        validate_rate(rate)?;
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Raw aggregation logits; `None` when `L = 1`.
    pub fn layer_weights(&self) -> Option<&[f64]> {
        (self.dims.layers > 1).then(|| &self.params[self.dims.layout().mix])
    }

    pub fn w1(&self) -> &[f64] {
        &self.params[self.dims.layout().w1]
    }

    pub fn b1(&self) -> &[f64] {
        &self.params[self.dims.layout().b1]
    }

    pub fn w2(&self) -> &[f64] {
        &self.params[self.dims.layout().w2]
    }

    pub fn b2(&self) -> &[f64] {
        &self.params[self.dims.layout().b2]
    }

    /// Draws an inverted-dropout mask: entries are 0 or `1 / (1 - rate)`.
    /// Consumes no randomness when the rate is zero.
    pub fn sample_dropout_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let h = self.dims.hidden;
        if self.dropout_rate == 0.0 {
            return vec![1.0; h];
        }
        let keep = 1.0 / (1.0 - self.dropout_rate);
        (0..h)
            .map(|_| {
                if rng.random::<f64>() < self.dropout_rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }

    pub fn forward_eval(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward_with_mask(x, vec![1.0; self.dims.hidden])
    }

    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let mask = self.sample_dropout_mask(rng);
        self.forward_with_mask(x, mask)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        match (mode, rng) {
            (Mode::Eval, _) => self.forward_eval(x),
            (Mode::Train, Some(rng)) => self.forward_train(x, rng),
            (Mode::Train, None) => Err(Error::Contract(
                "train-mode forward requires a random generator".into(),
            )),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let Dims {
            input: d,
            layers: l,
            ..
        } = self.dims;
        if x.len() != l * d {
            return Err(Error::Shape(format!(
                "input has {} values, model expects {l} x {d}",
                x.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("input feature {i} is not finite")));
        }
        Ok(())
    }

    /// Softmax layer mix and the aggregated `[D]` input.
    fn aggregate(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let Dims {
            input: d,
            layers: l,
            ..
        } = self.dims;
        if l == 1 {
            return (vec![1.0], x.to_vec());
        }
        let mix = softmax_vec(&self.params[self.dims.layout().mix]);
        let mut agg = vec![0.0; d];
        for (row, &s) in x.chunks_exact(d).zip(&mix) {
            agg.iter_mut().zip(row).for_each(|(a, v)| *a += s * v);
        }
        (mix, agg)
    }

    fn pre_activation(&self, aggregated: &[f64]) -> Vec<f64> {
        let layout = self.dims.layout();
        self.params[layout.w1]
            .chunks_exact(self.dims.input)
            .zip(&self.params[layout.b1])
            .map(|(row, b)| dot(row, aggregated) + b)
            .collect()
    }

    /// `relu(w1 · agg(x) + b1)`, the hidden activation before dropout. Every
    /// dropout pass over the same input shares it.
    pub fn hidden_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (_, agg) = self.aggregate(x);
        Ok(self
            .pre_activation(&agg)
            .into_iter()
            .map(|z| z.max(0.0))
            .collect())
    }

    /// Output logits from a hidden activation and a dropout mask.
    pub fn logits_from_hidden(&self, post_activation: &[f64], mask: &[f64]) -> Vec<f64> {
        let h = self.dims.hidden;
        assert!(
            post_activation.len() == h && mask.len() == h,
            "hidden width mismatch"
        );
        let layout = self.dims.layout();
        let hidden: Vec<f64> = post_activation
            .iter()
            .zip(mask)
            .map(|(a, m)| a * m)
            .collect();
        self.params[layout.w2]
            .chunks_exact(h)
            .zip(&self.params[layout.b2])
            .map(|(row, b)| dot(row, &hidden) + b)
            .collect()
    }

    /// Forward pass with an explicit dropout mask.
    pub fn forward_with_mask(&self, x: &[f64], mask: Vec<f64>) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        if mask.len() != self.dims.hidden {
            return Err(Error::Shape(format!(
                "dropout mask has {} entries, expected {}",
                mask.len(),
                self.dims.hidden
            )));
        }
        let (layer_mix, aggregated_input) = self.aggregate(x);
        let pre_activation = self.pre_activation(&aggregated_input);
        let post_activation: Vec<f64> = pre_activation.iter().map(|&z| z.max(0.0)).collect();
        let logits = self.logits_from_hidden(&post_activation, &mask);
        let cache = ForwardCache {
            dims: self.dims,
            input: x.to_vec(),
            layer_mix,
            aggregated_input,
            pre_activation,
            post_activation,
            dropout_mask: mask,
            logits: logits.clone(),
        };
        Ok((logits, cache))
    }

    /// Exact gradient of the loss with respect to every parameter, given the
    /// gradient with respect to the logits of the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros(self.dims);
        self.backward_into(cache, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        if cache.dims != self.dims || grads.dims != self.dims {
            return Err(Error::Contract(format!(
                "forward cache or gradient buffer built for {:?}, model is {:?}",
                cache.dims, self.dims
            )));
        }
        let Dims {
            input: d,
            hidden: h,
            classes: c,
            layers: l,
        } = self.dims;
        if grad_logits.len() != c {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries, expected {c}",
                grad_logits.len()
            )));
        }
        let layout = self.dims.layout();
        let w1 = &self.params[layout.w1.clone()];
        let w2 = &self.params[layout.w2.clone()];
        let g = &mut grads.values;

        // output affine
        let mut grad_hidden = vec![0.0; h];
        for (ci, &gc) in grad_logits.iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            g[layout.b2.start + ci] += gc;
            let row = ci * h;
            for hi in 0..h {
                let act = cache.post_activation[hi] * cache.dropout_mask[hi];
                g[layout.w2.start + row + hi] += gc * act;
                grad_hidden[hi] += w2[row + hi] * gc;
            }
        }

        // dropout and relu
        let grad_pre: Vec<f64> = (0..h)
            .map(|hi| {
                if cache.pre_activation[hi] > 0.0 {
                    grad_hidden[hi] * cache.dropout_mask[hi]
                } else {
                    0.0
                }
            })
            .collect();

        // first affine
        let mut grad_agg = vec![0.0; if l > 1 { d } else { 0 }];
        for (hi, &gp) in grad_pre.iter().enumerate() {
            if gp == 0.0 {
                continue;
            }
            g[layout.b1.start + hi] += gp;
            let row = hi * d;
            for di in 0..d {
                g[layout.w1.start + row + di] += gp * cache.aggregated_input[di];
            }
            if l > 1 {
                for di in 0..d {
                    grad_agg[di] += w1[row + di] * gp;
                }
            }
        }

        // softmax-weighted layer sum
        if l > 1 {
            let per_layer: Vec<f64> = cache
                .input
                .chunks_exact(d)
                .map(|row| dot(row, &grad_agg))
                .collect();
            let weighted: f64 = per_layer
                .iter()
                .zip(&cache.layer_mix)
                .map(|(u, s)| u * s)
                .sum();
            for (li, (&u, &s)) in per_layer.iter().zip(&cache.layer_mix).enumerate() {
                g[layout.mix.start + li] += s * (u - weighted);
            }
        }
        Ok(())
    }
}

fn validate_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Validation(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Bookkeeping from one forward pass, consumed by [`MlpClassifier::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: Dims,
    pub input: Vec<f64>,
    /// Softmax-normalized layer weights (`[1.0]` when `L = 1`).
    pub layer_mix: Vec<f64>,
    pub aggregated_input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    /// `relu(pre_activation)`, before the dropout mask is applied.
    pub post_activation: Vec<f64>,
    pub dropout_mask: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradient buffer with the same flat layout as [`MlpClassifier`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    dims: Dims,
    values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.n_params()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn w1(&self) -> &[f64] {
        &self.values[self.dims.layout().w1]
    }

    pub fn b1(&self) -> &[f64] {
        &self.values[self.dims.layout().b1]
    }

    pub fn w2(&self) -> &[f64] {
        &self.values[self.dims.layout().w2]
    }

    pub fn b2(&self) -> &[f64] {
        &self.values[self.dims.layout().b2]
    }

    pub fn layer_weights(&self) -> Option<&[f64]> {
        (self.dims.layers > 1).then(|| &self.values[self.dims.layout().mix])
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamWState {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step_count: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One optimizer step. Parameters are left untouched if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                index,
                step: self.step_count + 1,
                value: grads[index],
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            *p *= decay;
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> ProbDist {
    ProbDist::from_normalized(softmax_vec(logits))
}

pub(crate) fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, dims: Dims, rate: f64) -> MlpClassifier {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MlpClassifier::new(dims, rate, &mut rng).unwrap();
        // nonzero biases and layer logits so every path is exercised
        for p in m.params_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        m
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = MlpClassifier::zeros(Dims::new(3, 5, 4), 0.4).unwrap();
        let (logits, cache) = m.forward_eval(&[1.0, -2.0, 3.5]).unwrap();
        assert_eq!(logits, vec![0.0; 4]);
        assert!(cache.dropout_mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_relu_case() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let m = MlpClassifier::from_parts(&eye, &[0.0, 0.0], &eye, &[0.0, 0.0], 0.0).unwrap();
        let (logits, _) = m.forward_eval(&[1.0, -1.0]).unwrap();
        assert_eq!(logits, vec![1.0, 0.0]);
    }

    #[test]
    fn forward_matches_straight_line_arithmetic() {
        let dims = Dims::new(5, 4, 3);
        let m = random_model(7, dims, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (logits, _) = m.forward_eval(&x).unwrap();

        let (w1, b1, w2, b2) = (m.w1(), m.b1(), m.w2(), m.b2());
        let mut hidden = [0.0; 4];
        for h in 0..4 {
            let mut z = b1[h];
            for d in 0..5 {
                z += w1[h * 5 + d] * x[d];
            }
            hidden[h] = if z > 0.0 { z } else { 0.0 };
        }
        for c in 0..3 {
            let mut z = b2[c];
            for h in 0..4 {
                z += w2[c * 4 + h] * hidden[h];
            }
            assert!((z - logits[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let m = random_model(1, Dims::new(6, 8, 4).with_layers(3), 0.4);
        let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let (a, _) = m.forward_eval(&x).unwrap();
        let (b, _) = m.forward_eval(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = MlpClassifier::zeros(Dims::new(3, 2, 2), 0.0).unwrap();
        assert!(matches!(m.forward_eval(&[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(
            m.forward_eval(&[1.0, f64::NAN, 0.0]),
            Err(Error::Input(_))
        ));
        let none: Option<&mut ChaCha8Rng> = None;
        assert!(matches!(
            m.forward(&[1.0, 2.0, 3.0], Mode::Train, none),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let m = random_model(2, Dims::new(4, 6, 3).with_layers(2), 0.0);
        let x = vec![0.5; 8];
        let (_, cache) = m.forward_eval(&x).unwrap();
        let g = m.backward(&cache, &[0.0; 3]).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_weight_gradient_is_outer_product() {
        let m = random_model(4, Dims::new(3, 5, 2), 0.0);
        let (_, cache) = m.forward_eval(&[0.3, 1.2, -0.7]).unwrap();
        let up = [0.25, -1.5];
        let g = m.backward(&cache, &up).unwrap();
        for (c, u) in up.iter().enumerate() {
            for h in 0..5 {
                assert_eq!(g.w2()[c * 5 + h], u * cache.post_activation[h]);
            }
        }
        assert_eq!(g.b2(), &up);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let a = random_model(5, Dims::new(3, 4, 2), 0.0);
        let b = random_model(5, Dims::new(3, 5, 2), 0.0);
        let (_, cache) = a.forward_eval(&[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            b.backward(&cache, &[1.0, 0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dropout_mask_is_inverted() {
        let m = MlpClassifier::zeros(Dims::new(2, 10_000, 2), 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = m.sample_dropout_mask(&mut rng);
        assert!(mask
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-15));
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn adamw_examples() {
        let mut opt = AdamWState::new(1, 0.0);
        let mut theta = [0.0];
        opt.step(&mut theta, &[1.0], 0.1).unwrap();
        assert!((theta[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((theta[0] + 0.0999999990).abs() < 1e-10);

        let mut opt = AdamWState::new(1, 0.1);
        let mut theta = [1.0];
        opt.step(&mut theta, &[0.0], 0.1).unwrap();
        assert!((theta[0] - 0.99).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut opt = AdamWState::new(3, 0.0);
        let mut theta = [1.5, -2.0, 0.25];
        for expected_step in 1..=5 {
            opt.step(&mut theta, &[0.0; 3], 0.01).unwrap();
            assert_eq!(opt.step_count(), expected_step);
        }
        assert_eq!(theta, [1.5, -2.0, 0.25]);
    }

    #[test]
    fn adamw_aborts_on_non_finite_grad() {
        let mut opt = AdamWState::new(2, 0.1);
        let mut theta = [1.0, 2.0];
        let err = opt
            .step(&mut theta, &[0.5, f64::INFINITY], 0.1)
            .unwrap_err();
        assert!(matches!(
            err,
            Error::NonFiniteGradient {
                index: 1,
                step: 1,
                ..
            }
        ));
        assert_eq!(theta, [1.0, 2.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).probs(), &[0.25; 4]);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln()]);
        for (a, b) in p.probs().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
        let a = softmax(&[0.3, -1.0, 2.0]);
        let b = softmax(&[100.3, 99.0, 102.0]);
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn serde_roundtrip_validates() {
        let m = random_model(9, Dims::new(3, 4, 2).with_layers(2), 0.4);
        let json = serde_json::to_string(&m).unwrap();
        let back: MlpClassifier = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let bad = json.replacen("\"params\":[", "\"params\":[1.0,", 1);
        assert!(serde_json::from_str::<MlpClassifier>(&bad).is_err());
    }
}
