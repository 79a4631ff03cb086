mod common;

use common::dist;
use mifuse::adapt::{
    adapt_student, adaptation_objective, diversity_loss, train_source, AdaptCheckpoint,
    AdaptConfig, AdaptOptions, ProviderTeacher,
};
use mifuse::dataio::{generate_synth_shift, SynthShiftSpec};
use mifuse::evalkit::{evaluate, EvalReport};
use mifuse::fusion::{FusionConfig, Gate, Generation, Weighting};
use mifuse::numkit::softmax;
use mifuse::teachers::{
    populate_cache, CacheOnlyProvider, NoisyOracle, NoisyOracleConfig, TeacherCache,
};
use mifuse::uncertainty::ProbDist;
use proptest::prelude::*;

fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<ProbDist>, f64)> {
    (2..6usize, 1..6usize).prop_flat_map(|(c, b)| {
        (
            prop::collection::vec(prop::collection::vec(-4.0..4.0f64, c), b),
            prop::collection::vec(dist(c), b),
            0.0..2.0f64,
        )
    })
}

proptest! {
    #[test]
    fn objective_gradient_matches_finite_differences((logits, targets, lambda) in batch()) {
        let (_, grad) = adaptation_objective(&logits, &targets, lambda);
        let h = 1e-5;
        for i in 0..logits.len() {
            for k in 0..logits[i].len() {
                let mut up = logits.clone();
                let mut down = logits.clone();
                up[i][k] += h;
                down[i][k] -= h;
                let fd = (adaptation_objective(&up, &targets, lambda).0
                    - adaptation_objective(&down, &targets, lambda).0)
                    / (2.0 * h);
                let a = grad[i][k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                prop_assert!(rel < 1e-4, "row {i} class {k}: analytic {a}, fd {fd}");
            }
        }
    }

    #[test]
    fn diversity_loss_stays_in_bounds(
        rows in (2..8usize).prop_flat_map(|c| prop::collection::vec(prop::collection::vec(-30.0..30.0f64, c), 1..10))
    ) {
        let c = rows[0].len() as f64;
        let probs: Vec<ProbDist> = rows.iter().map(|z| softmax(z)).collect();
        let (l, _) = diversity_loss(&probs);
        prop_assert!(l <= 1e-12 && l >= -c.ln() - 1e-12, "L_div {l} for C = {c}");
    }

    #[test]
    fn permuting_classes_keeps_accuracies(
        pairs in prop::collection::vec((0..4usize, 0..4usize), 1..60),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = EvalReport::from_predictions(&labels, &preds, 4).unwrap();
        let pl: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        let pp: Vec<usize> = preds.iter().map(|&y| perm[y]).collect();
        let b = EvalReport::from_predictions(&pl, &pp, 4).unwrap();
        prop_assert!((a.unweighted_accuracy - b.unweighted_accuracy).abs() < 1e-12);
        prop_assert_eq!(a.plain_accuracy, b.plain_accuracy);
    }
}

fn oracle_caches(
    spec: &SynthShiftSpec,
    oracle: NoisyOracleConfig,
    config: &AdaptConfig,
) -> (mifuse::dataio::SynthShift, TeacherCache, TeacherCache) {
    let bench = generate_synth_shift(spec).unwrap();
    let oracle = NoisyOracle::new(oracle, &bench.target).unwrap();
    let c = bench.target.n_classes();
    let sampled = TeacherCache::in_memory(c);
    let greedy = TeacherCache::in_memory(c);
    populate_cache(
        &oracle,
        &sampled,
        &bench.target,
        config.n_lm,
        config.lalm_temperature,
    )
    .unwrap();
    populate_cache(&oracle, &greedy, &bench.target, 1, 0.0).unwrap();
    (bench, sampled, greedy)
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let config = AdaptConfig {
        hidden_dim: 16,
        max_steps: 90,
        checkpoint_interval: 25,
        dev_interval: 10,
        seed: 5,
        ..Default::default()
    };
    let spec = SynthShiftSpec {
        samples_per_class: 16,
        feature_dim: 6,
        seed: 5,
        ..Default::default()
    };
    let oracle = NoisyOracleConfig {
        accuracy: 0.7,
        concentration: 5.0,
        seed: 5,
    };
    let (bench, sampled, greedy) = oracle_caches(&spec, oracle, &config);
    let source = train_source(&bench.source, &config, 5).unwrap().model;
    let teacher = ProviderTeacher {
        provider: &CacheOnlyProvider,
        sampled: &sampled,
        greedy: &greedy,
    };
    let fusion = FusionConfig::default();
    let run = |cfg: &AdaptConfig, path, resume| {
        adapt_student(
            &bench.target_unlabeled,
            &source,
            &teacher,
            &fusion,
            cfg,
            AdaptOptions {
                dev: Some(&bench.target),
                checkpoint_path: path,
                resume,
            },
        )
        .unwrap()
    };
    let straight = run(&config, None, None);

    // Interrupt after 40 steps, then continue the saved state to the full budget.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let short = AdaptConfig {
        max_steps: 40,
        ..config.clone()
    };
    run(&short, Some(&path), None);
    let mut ckpt = AdaptCheckpoint::load(&path).unwrap();
    assert_eq!(ckpt.state.step, 40);
    ckpt.config = config.clone();
    ckpt.state.stopped = false;
    let resumed = run(&config, None, Some(ckpt));

    assert_eq!(resumed.state, straight.state);
    assert_eq!(resumed.student, straight.student);
}

#[test]
fn perfect_teacher_recovers_separable_target() {
    // Separable variant of the benchmark: with exact provider labels the
    // student is effectively trained with supervision.
    let spec = SynthShiftSpec {
        separation: 8.0,
        samples_per_class: 100,
        ..Default::default()
    };
    let config = AdaptConfig {
        hidden_dim: 64,
        ..Default::default()
    };
    let oracle = NoisyOracleConfig {
        accuracy: 1.0,
        concentration: f64::INFINITY,
        seed: 0,
    };
    let (bench, sampled, greedy) = oracle_caches(&spec, oracle, &config);
    let source = train_source(&bench.source, &config, 0).unwrap().model;
    let teacher = ProviderTeacher {
        provider: &CacheOnlyProvider,
        sampled: &sampled,
        greedy: &greedy,
    };
    let fusion = FusionConfig::new(Generation::Multi, Gate::Direct, Weighting::Equal);
    let out = adapt_student(
        &bench.target_unlabeled,
        &source,
        &teacher,
        &fusion,
        &config,
        AdaptOptions::default(),
    )
    .unwrap();
    let zero_shot = evaluate(&source, &bench.target).unwrap().plain_accuracy;
    let acc = evaluate(&out.student, &bench.target)
        .unwrap()
        .plain_accuracy;
    assert!(
        acc >= 0.95,
        "student accuracy {acc} (zero-shot {zero_shot})"
    );
}
