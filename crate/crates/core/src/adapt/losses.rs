use crate::numkit::softmax_vec;
use crate::uncertainty::{entropy_of, ProbDist};

/// Cross-entropy against a soft target and its exact logit gradient
/// `softmax(logits) − target`.
pub fn soft_cross_entropy(logits: &[f64], target: &ProbDist) -> (f64, Vec<f64>) {
    assert_eq!(
        logits.len(),
        target.n_classes(),
        "logit/target class mismatch"
    );
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = -target
        .probs()
        .iter()
        .zip(logits)
        .filter(|(&t, _)| t > 0.0)
        .map(|(t, z)| t * (z - log_z))
        .sum::<f64>();
    let grad = softmax_vec(logits)
        .iter()
        .zip(target.probs())
        .map(|(p, t)| p - t)
        .collect();
    (loss, grad)
}

/// Negative entropy of the batch-mean prediction and its gradient with
/// respect to every probability entry, `(ln p̄_c + 1) / B`.
pub fn diversity_loss(batch_probs: &[ProbDist]) -> (f64, Vec<Vec<f64>>) {
    let rows: Vec<&[f64]> = batch_probs.iter().map(ProbDist::probs).collect();
    diversity_loss_rows(&rows)
}

pub(crate) fn diversity_loss_rows(rows: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
    assert!(!rows.is_empty(), "diversity loss needs a nonempty batch");
    let c = rows[0].len();
    let b = rows.len() as f64;
    let mut mean = vec![0.0; c];
    for r in rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, p)| *m += p / b);
    }
    let loss = -entropy_of(&mean);
    let g: Vec<f64> = mean
        .iter()
        .map(|&m| (m.max(f64::MIN_POSITIVE).ln() + 1.0) / b)
        .collect();
    (loss, vec![g; rows.len()])
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub(crate) fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Batch objective `mean_i CE(z_i, t_i) − λ H(mean_i softmax(z_i))` with its
/// gradient with respect to every logit row.
pub fn adaptation_objective(
    logits: &[Vec<f64>],
    targets: &[ProbDist],
    lambda_div: f64,
) -> (f64, Vec<Vec<f64>>) {
    assert_eq!(logits.len(), targets.len(), "one target per logit row");
    let b = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, t) in logits.iter().zip(targets) {
        let (l, g) = soft_cross_entropy(z, t);
        total += l / b;
        grads.push(g.into_iter().map(|v| v / b).collect::<Vec<f64>>());
    }
    if lambda_div != 0.0 {
        let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax_vec(z)).collect();
        let rows: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
        let (div, dprobs) = diversity_loss_rows(&rows);
        total += lambda_div * div;
        for ((g, p), dp) in grads.iter_mut().zip(&probs).zip(&dprobs) {
            let dz = softmax_backward(p, dp);
            g.iter_mut().zip(dz).for_each(|(a, d)| *a += lambda_div * d);
        }
    }
    (total, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::softmax;

    #[test]
    fn ce_fixed_point() {
        let logits = [0.3, -1.2, 2.0];
        let target = softmax(&logits);
        let (loss, grad) = soft_cross_entropy(&logits, &target);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
        assert!((loss - crate::uncertainty::entropy(&target)).abs() < 1e-12);
    }

    #[test]
    fn ce_examples() {
        let (loss, _) = soft_cross_entropy(&[0.0; 4], &ProbDist::uniform(4));
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let (loss, _) = soft_cross_entropy(&[1.0, 0.0], &ProbDist::new(vec![0.7, 0.3]).unwrap());
        let s1 = 1.0 / (1.0 + (-1f64).exp());
        let expected = -0.7 * s1.ln() - 0.3 * (1.0 - s1).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.613262).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn diversity_examples() {
        let (loss, _) = diversity_loss(&vec![ProbDist::one_hot(3, 1); 4]);
        assert_eq!(loss, 0.0);
        let batch: Vec<ProbDist> = (0..4).map(|c| ProbDist::one_hot(4, c)).collect();
        let (loss, _) = diversity_loss(&batch);
        assert!((loss + 4f64.ln()).abs() < 1e-12);
        let (loss, grads) = diversity_loss(&[
            ProbDist::one_hot(2, 0),
            ProbDist::new(vec![0.5, 0.5]).unwrap(),
        ]);
        assert!((loss + 0.562335).abs() < 1e-6, "{loss}");
        assert!((grads[0][0] - (0.75f64.ln() + 1.0) / 2.0).abs() < 1e-15);
    }
}
