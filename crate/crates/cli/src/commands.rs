use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use mifuse::adapt::{
    adapt_student, lr_scan, run_ablation, train_source, AdaptCheckpoint, AdaptOptions,
    ProviderTeacher,
};
use mifuse::dataio::{generate_synth_shift, load_dataset, split, FeatureDataset};
use mifuse::evalkit::{config_hash, curve_csv, curve_export, evaluate, MetricRecord, ReportFile};
use mifuse::numkit::MlpClassifier;
use mifuse::teachers::{
    populate_cache, CacheOnlyProvider, HttpProvider, LalmProvider, NoisyOracle, TeacherCache,
};
use serde::Serialize;

use crate::config::{ProviderSpec, RunConfig};
use crate::{Cli, CliError, Command, SynthArgs};

pub const ENV_PROVIDER_URL: &str = "MIFUSE_PROVIDER_URL";
pub const ENV_PROVIDER_TOKEN: &str = "MIFUSE_PROVIDER_TOKEN";

const RUN_CONFIG: &str = "run_config.json";

pub fn run(cli: Cli) -> Result<(), CliError> {
    let common = &cli.common;
    if common.resume && !matches!(cli.command, Command::Adapt) {
        return Err(CliError::config("--resume only applies to adapt"));
    }
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.synth.seed = cfg.seed;
    cfg.adapt.seed = cfg.seed;
    if let Command::SynthGen(args) = &cli.command {
        apply_synth_flags(&mut cfg, args)?;
    }
    cfg.validate()?;

    let name = command_name(&cli.command);
    let dir = match common.out.clone().or_else(|| cfg.out.clone()) {
        Some(d) => d,
        None => {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            PathBuf::from("runs").join(format!("{name}-{secs}"))
        }
    };
    cfg.out = Some(dir.clone());
    prepare_dir(&dir, outputs(&cli.command), common.overwrite, common.resume)?;
    write_json(&dir.join(RUN_CONFIG), &cfg)?;
    println!("{name}: run directory {}", dir.display());

    match cli.command {
        Command::SynthGen(_) => synth_gen(&cfg, &dir),
        Command::TrainSource => train_source_cmd(&cfg, &dir),
        Command::CacheLalm => cache_lalm(&cfg, &dir),
        Command::Adapt => adapt(&cfg, &dir, common.resume),
        Command::Evaluate => evaluate_cmd(&cfg, &dir),
        Command::Ablate => ablate(&cfg, &dir),
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::SynthGen(_) => "synth-gen",
        Command::TrainSource => "train-source",
        Command::CacheLalm => "cache-lalm",
        Command::Adapt => "adapt",
        Command::Evaluate => "evaluate",
        Command::Ablate => "ablate",
    }
}

/// Files each command writes into its run directory.
fn outputs(cmd: &Command) -> &'static [&'static str] {
    match cmd {
        Command::SynthGen(_) => &["source.jsonl", "target.jsonl", "target_unlabeled.jsonl"],
        Command::TrainSource => &["source_model.json", "metrics.jsonl", "report.json"],
        Command::CacheLalm => &["cache_stats.json"],
        Command::Adapt => &[
            "student.json",
            "checkpoint.json",
            "metrics.jsonl",
            "curve.csv",
            "report.json",
            "lr_scan.json",
        ],
        Command::Evaluate => &["report.json"],
        Command::Ablate => &["ablation.csv", "ablation.json"],
    }
}

fn apply_synth_flags(cfg: &mut RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    let s = &mut cfg.synth;
    if let Some(v) = args.n_classes {
        if v < 2 {
            return Err(CliError::config("--n-classes must be >= 2"));
        }
        s.n_classes = v;
    }
    if let Some(v) = args.feature_dim {
        if v < 2 {
            return Err(CliError::config("--feature-dim must be >= 2"));
        }
        s.feature_dim = v;
    }
    if let Some(v) = args.samples_per_class {
        if v < 8 {
            return Err(CliError::config("--samples-per-class must be >= 8"));
        }
        s.samples_per_class = v;
    }
    if let Some(v) = args.separation {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::config("--separation must be positive"));
        }
        s.separation = v;
    }
    if let Some(v) = args.offset_norm {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(CliError::config("--offset-norm must be >= 0"));
        }
        s.shift.offset_norm = v;
    }
    if let Some(v) = args.rotation_deg {
        if !v.is_finite() {
            return Err(CliError::config("--rotation-deg must be finite"));
        }
        s.shift.rotation_deg = v;
    }
    if let Some(v) = args.noise_scale {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(CliError::config("--noise-scale must be >= 0"));
        }
        s.shift.noise_scale = v;
    }
    Ok(())
}

/// Creates the run directory. Outputs of an earlier run are an error unless
/// they are to be replaced or resumed.
fn prepare_dir(dir: &Path, files: &[&str], overwrite: bool, resume: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let existing: Vec<PathBuf> = files
        .iter()
        .chain(std::iter::once(&RUN_CONFIG))
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .collect();
    if existing.is_empty() || resume {
        return Ok(());
    }
    if !overwrite {
        return Err(CliError::missing(format!(
            "{} already exists; pass --overwrite to replace it",
            existing[0].display()
        )));
    }
    for p in existing {
        fs::remove_file(&p)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn write_metrics(path: &Path, log: &[MetricRecord]) -> Result<(), CliError> {
    let mut out = Vec::new();
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    let p = path
        .as_deref()
        .ok_or_else(|| CliError::missing(format!("{key} is not set")))?;
    if !p.is_file() {
        return Err(CliError::missing(format!(
            "{key}: {} not found",
            p.display()
        )));
    }
    Ok(p)
}

fn load(path: &Option<PathBuf>, key: &str) -> Result<FeatureDataset, CliError> {
    Ok(load_dataset(require(path, key)?)?)
}

fn load_model(path: &Option<PathBuf>, key: &str) -> Result<MlpClassifier, CliError> {
    let p = require(path, key)?;
    serde_json::from_slice(&fs::read(p)?)
        .map_err(|e| CliError::config(format!("{key}: {} is not a model: {e}", p.display())))
}

/// Labeled target data split into (dev, test).
fn dev_test(cfg: &RunConfig) -> Result<Option<(FeatureDataset, FeatureDataset)>, CliError> {
    if cfg.data.target_labeled.is_none() {
        return Ok(None);
    }
    let labeled = load(&cfg.data.target_labeled, "data.target_labeled")?;
    let f = cfg.data.dev_fraction;
    let (dev, test, _) = split(&labeled, [f, 1.0 - f, 0.0], cfg.seed)?;
    Ok(Some((dev, test)))
}

fn synth_gen(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let bench = generate_synth_shift(&cfg.synth)?;
    bench.source.save(dir.join("source.jsonl"))?;
    bench.target.save(dir.join("target.jsonl"))?;
    bench
        .target_unlabeled
        .save(dir.join("target_unlabeled.jsonl"))?;
    println!(
        "wrote {} source and {} target records",
        bench.source.len(),
        bench.target.len()
    );
    Ok(())
}

fn train_source_cmd(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let source = load(&cfg.data.source, "data.source")?;
    let f = cfg.data.dev_fraction;
    let (train, dev, _) = split(&source, [1.0 - f, f, 0.0], cfg.seed)?;
    println!(
        "training on {} source records, {} held out",
        train.len(),
        dev.len()
    );
    let fit = train_source(&train, &cfg.adapt, cfg.seed)?;
    println!(
        "stopped after {} steps, best at step {}",
        fit.steps, fit.best_step
    );
    write_json(&dir.join("source_model.json"), &fit.model)?;
    let log: Vec<MetricRecord> = fit
        .losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| MetricRecord {
            step: i as u64,
            loss,
            dev_ua: None,
        })
        .collect();
    write_metrics(&dir.join("metrics.jsonl"), &log)?;
    let eval_set = if dev.is_empty() { &train } else { &dev };
    let report = evaluate(&fit.model, eval_set)?;
    println!("source dev UA {:.4}", report.unweighted_accuracy);
    write_report(cfg, dir, report)
}

fn write_report(
    cfg: &RunConfig,
    dir: &Path,
    report: mifuse::evalkit::EvalReport,
) -> Result<(), CliError> {
    let file = ReportFile {
        report,
        config_hash: config_hash(cfg)?,
        seed: cfg.seed,
    };
    write_json(&dir.join("report.json"), &file)
}

fn build_provider(cfg: &RunConfig) -> Result<(Box<dyn LalmProvider>, bool), CliError> {
    Ok(match &cfg.provider {
        ProviderSpec::CacheOnly => (Box::new(CacheOnlyProvider), true),
        ProviderSpec::Remote {
            max_retries,
            initial_backoff_ms,
        } => {
            let url = std::env::var(ENV_PROVIDER_URL).map_err(|_| {
                CliError::config(format!("remote provider needs {ENV_PROVIDER_URL}"))
            })?;
            let token = std::env::var(ENV_PROVIDER_TOKEN).ok();
            let http = HttpProvider::new(&url, token)
                .with_retries(*max_retries, Duration::from_millis(*initial_backoff_ms));
            (Box::new(http), false)
        }
        ProviderSpec::NoisyOracle(oc) => {
            let labeled = load(&cfg.data.target_labeled, "data.target_labeled")?;
            (Box::new(NoisyOracle::new(oc.clone(), &labeled)?), false)
        }
    })
}

/// Opens a cache for appending, or read-only when nothing can add to it.
fn open_cache(path: &Path, n_classes: usize, read_only: bool) -> Result<TeacherCache, CliError> {
    if read_only {
        if !path.exists() {
            return Ok(TeacherCache::in_memory(n_classes));
        }
        return Ok(TeacherCache::load_read_only(path, n_classes)?);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(TeacherCache::open(path, n_classes)?)
}

/// Target data for adaptation; falls back to the labeled file with labels dropped.
fn target_data(cfg: &RunConfig) -> Result<FeatureDataset, CliError> {
    if cfg.data.target.is_some() {
        return Ok(load(&cfg.data.target, "data.target")?.unlabeled());
    }
    Ok(load(&cfg.data.target_labeled, "data.target")?.unlabeled())
}

#[derive(Serialize)]
struct CacheStats {
    records: usize,
    sampled_added: usize,
    sampled_total: usize,
    greedy_added: usize,
    greedy_total: usize,
}

fn cache_lalm(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let target = target_data(cfg)?;
    let (provider, read_only) = build_provider(cfg)?;
    if read_only {
        return Err(CliError::config(
            "cache-lalm needs a provider other than cache_only",
        ));
    }
    let c = target.n_classes();
    let sampled = open_cache(&cfg.cache.sampled, c, false)?;
    let greedy = open_cache(&cfg.cache.greedy, c, false)?;
    println!("querying teacher for {} utterances", target.len());
    let sampled_added = populate_cache(
        provider.as_ref(),
        &sampled,
        &target,
        cfg.adapt.n_lm,
        cfg.adapt.lalm_temperature,
    )?;
    let greedy_added = populate_cache(provider.as_ref(), &greedy, &target, 1, 0.0)?;
    let stats = CacheStats {
        records: target.len(),
        sampled_added,
        sampled_total: sampled.len(),
        greedy_added,
        greedy_total: greedy.len(),
    };
    println!(
        "cached {sampled_added} sampled and {greedy_added} greedy answers ({} and {} total)",
        stats.sampled_total, stats.greedy_total
    );
    write_json(&dir.join("cache_stats.json"), &stats)
}

fn adapt(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<(), CliError> {
    let source_model = load_model(&cfg.source_model, "source_model")?;
    let target = target_data(cfg)?;
    let split = dev_test(cfg)?;
    let (provider, read_only) = build_provider(cfg)?;
    let c = target.n_classes();
    let sampled = open_cache(&cfg.cache.sampled, c, read_only)?;
    let greedy = open_cache(&cfg.cache.greedy, c, read_only)?;
    let teacher = ProviderTeacher {
        provider: provider.as_ref(),
        sampled: &sampled,
        greedy: &greedy,
    };
    let dev = split.as_ref().map(|(d, _)| d);

    if cfg.lr_scan {
        if resume {
            return Err(CliError::config("--resume is not supported with lr_scan"));
        }
        let grid = &cfg.adapt.student_lr_grid;
        println!("scanning {} learning rates", grid.len());
        let scan = lr_scan(
            grid,
            &target,
            &source_model,
            &teacher,
            &cfg.fusion,
            &cfg.adapt,
            dev,
        )?;
        for r in &scan.runs {
            println!(
                "  lr {}: dev UA {:.4} after {} steps",
                r.lr, r.dev_ua, r.steps
            );
        }
        println!("selected lr {}", scan.best_lr);
        write_json(&dir.join("lr_scan.json"), &scan.runs)?;
        write_json(&dir.join("student.json"), &scan.student)?;
        if let Some((_, test)) = &split {
            let report = evaluate(&scan.student, test)?;
            println!("test UA {:.4}", report.unweighted_accuracy);
            write_report(cfg, dir, report)?;
        }
        return Ok(());
    }

    let ckpt_path = dir.join("checkpoint.json");
    let resume_from = if resume {
        if !ckpt_path.is_file() {
            return Err(CliError::missing(format!(
                "{} not found",
                ckpt_path.display()
            )));
        }
        let ckpt = AdaptCheckpoint::load(&ckpt_path)?;
        println!("resuming from step {}", ckpt.state.step);
        Some(ckpt)
    } else {
        None
    };
    println!(
        "adapting {} target records, fusion {}",
        target.len(),
        cfg.fusion
    );
    let out = adapt_student(
        &target,
        &source_model,
        &teacher,
        &cfg.fusion,
        &cfg.adapt,
        AdaptOptions {
            dev,
            checkpoint_path: Some(&ckpt_path),
            resume: resume_from,
        },
    )?;
    println!(
        "stopped after {} steps, best at step {}",
        out.state.step,
        out.state.plateau.best_step().unwrap_or(0)
    );
    write_json(&dir.join("student.json"), &out.student)?;
    write_metrics(&dir.join("metrics.jsonl"), &out.state.metric_log)?;
    if let Ok(points) = curve_export(&out.state.metric_log) {
        fs::write(dir.join("curve.csv"), curve_csv(&points))?;
    }
    if let Some((_, test)) = &split {
        let report = evaluate(&out.student, test)?;
        println!("test UA {:.4}", report.unweighted_accuracy);
        write_report(cfg, dir, report)?;
    }
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let model = load_model(&cfg.model, "model")?;
    let data = load(&cfg.data.target_labeled, "data.target_labeled")?;
    if !data.is_labeled() {
        return Err(CliError::config(
            "data.target_labeled has unlabeled records",
        ));
    }
    let report = evaluate(&model, &data)?;
    println!(
        "UA {:.4}, accuracy {:.4} over {} records",
        report.unweighted_accuracy, report.plain_accuracy, report.n
    );
    write_report(cfg, dir, report)
}

fn ablate(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let source_model = load_model(&cfg.source_model, "source_model")?;
    let target = target_data(cfg)?;
    let (dev, test) =
        dev_test(cfg)?.ok_or_else(|| CliError::missing("data.target_labeled is not set"))?;
    let c = target.n_classes();
    // Every cell must see the same teacher answers, so nothing is queried here.
    let sampled = open_cache(&cfg.cache.sampled, c, true)?;
    let greedy = open_cache(&cfg.cache.greedy, c, true)?;
    let ids = || target.records().iter().map(|r| r.id.as_str());
    let missing = sampled
        .first_missing(ids(), cfg.adapt.n_lm)
        .or_else(|| greedy.first_missing(ids(), 1));
    if let Some((id, index)) = missing {
        return Err(CliError::provider(format!(
            "no cached teacher prediction for ({id}, {index}); run cache-lalm first"
        )));
    }
    let teacher = ProviderTeacher {
        provider: &CacheOnlyProvider,
        sampled: &sampled,
        greedy: &greedy,
    };
    println!("running ablation cells");
    let outcome = run_ablation(&target, &dev, &test, &source_model, &teacher, &cfg.adapt)?;
    for (i, row) in outcome.rows.iter().enumerate() {
        let (g, s, w) = row.cell.label();
        println!(
            "  {g} {s} {w}: test UA {:.2}{}",
            100.0 * row.report.unweighted_accuracy,
            if i == outcome.best { " (best)" } else { "" }
        );
    }
    fs::write(dir.join("ablation.csv"), outcome.to_csv())?;
    write_json(&dir.join("ablation.json"), &outcome)
}
