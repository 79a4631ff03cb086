mod common;

use common::{dist, sample_set};
use mifuse::numkit::softmax;
use mifuse::uncertainty::{entropy, kl_divergence, mean_dist, mutual_information, ProbDist};
use proptest::prelude::*;

fn permute(p: &ProbDist, perm: &[usize]) -> ProbDist {
    ProbDist::new(perm.iter().map(|&i| p.probs()[i]).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn mi_is_bounded_by_entropy_of_mean(samples in sample_set(8, 12)) {
        let mi = mutual_information(&samples).unwrap();
        let h = entropy(&mean_dist(&samples).unwrap());
        prop_assert!(mi >= -1e-12, "mi {mi}");
        prop_assert!(mi <= h + 1e-12, "mi {mi} > H(mean) {h}");
    }

    #[test]
    fn kl_is_nonnegative((p, q) in (2..8usize).prop_flat_map(|c| (dist(c), dist(c)))) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn class_permutation_leaves_entropy_and_mi_unchanged(
        (samples, perm) in sample_set(7, 8).prop_flat_map(|s| {
            let c = s[0].n_classes();
            (Just(s), Just((0..c).collect::<Vec<_>>()).prop_shuffle())
        })
    ) {
        let permuted: Vec<ProbDist> = samples.iter().map(|p| permute(p, &perm)).collect();
        let (a, b) = (entropy(&samples[0]), entropy(&permuted[0]));
        prop_assert!((a - b).abs() < 1e-12);
        let (a, b) = (
            mutual_information(&samples).unwrap(),
            mutual_information(&permuted).unwrap(),
        );
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn replicated_distribution_has_zero_mi(p in (2..10usize).prop_flat_map(dist), k in 1..64usize) {
        let mi = mutual_information(&vec![p; k]).unwrap();
        prop_assert!(mi.abs() < 1e-12, "mi {mi} for {k} copies");
    }

    #[test]
    fn entropy_is_concave((p, q) in (2..8usize).prop_flat_map(|c| (dist(c), dist(c)))) {
        let h_mix = entropy(&mean_dist(&[p.clone(), q.clone()]).unwrap());
        prop_assert!(h_mix >= (entropy(&p) + entropy(&q)) / 2.0 - 1e-12);
    }

    #[test]
    fn softmax_is_valid_for_large_logits(logits in prop::collection::vec(-1e4..1e4f64, 1..12)) {
        let p = softmax(&logits);
        prop_assert!(p.probs().iter().all(|&x| x >= 0.0 && x.is_finite()));
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
