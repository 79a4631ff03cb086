//! `mifuse`: command-line driver for source training, teacher caching,
//! adaptation, evaluation and fusion ablations.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Source-free domain adaptation with uncertainty-weighted teacher fusion.
#[derive(Debug, Parser)]
#[command(name = "mifuse", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON); defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set adapt.batch_size=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for data generation, training and adaptation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `runs/<command>-<unix time>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace outputs already present in the run directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Continue an interrupted `adapt` run from its checkpoint.
    #[arg(long, global = true)]
    pub resume: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic source/target benchmark.
    SynthGen(SynthArgs),
    /// Train the source classifier on labeled source data.
    TrainSource,
    /// Query the teacher provider for every target utterance and cache the answers.
    CacheLalm,
    /// Adapt a student to the target domain.
    Adapt,
    /// Score a model on labeled data.
    Evaluate,
    /// Run every fusion strategy on cached teachers.
    Ablate,
}

/// Benchmark shape; each flag overrides the matching `synth` config field.
#[derive(Debug, Args, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    /// Distance between class means.
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub offset_norm: Option<f64>,
    #[arg(long)]
    pub rotation_deg: Option<f64>,
    /// Multiplier on target-domain noise.
    #[arg(long)]
    pub noise_scale: Option<f64>,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn provider(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<mifuse::Error> for CliError {
    fn from(e: mifuse::Error) -> Self {
        let code = match &e {
            e if e.is_provider_failure() => 4,
            mifuse::Error::Validation(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
