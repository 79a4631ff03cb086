#![allow(dead_code)]

use mifuse::uncertainty::ProbDist;
use proptest::prelude::*;

/// Distribution over `n` classes, sometimes with exact zeros.
pub fn dist(n: usize) -> impl Strategy<Value = ProbDist> {
    prop::collection::vec(prop_oneof![1 => Just(0.0), 6 => 1e-3..1.0f64], n).prop_map(|mut v| {
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        let s: f64 = v.iter().sum();
        ProbDist::new(v.into_iter().map(|x| x / s).collect()).unwrap()
    })
}

/// `k` distributions over a shared class count in `2..=max_c`.
pub fn sample_set(max_c: usize, max_k: usize) -> impl Strategy<Value = Vec<ProbDist>> {
    (2..=max_c, 1..=max_k).prop_flat_map(|(c, k)| prop::collection::vec(dist(c), k))
}
