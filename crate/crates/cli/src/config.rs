use std::fs;
use std::path::{Path, PathBuf};

use mifuse::adapt::AdaptConfig;
use mifuse::dataio::SynthShiftSpec;
use mifuse::fusion::FusionConfig;
use mifuse::teachers::NoisyOracleConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Everything a command needs, frozen into each run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub adapt: AdaptConfig,
    pub fusion: FusionConfig,
    pub synth: SynthShiftSpec,
    pub data: DataPaths,
    pub cache: CachePaths,
    pub provider: ProviderSpec,
    /// Source classifier consumed by `adapt` and `ablate`.
    pub source_model: Option<PathBuf>,
    /// Model scored by `evaluate`.
    pub model: Option<PathBuf>,
    /// Run the learning-rate scan instead of a single `adapt.student_lr`.
    pub lr_scan: bool,
    /// Run directory; `--out` overrides it.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            adapt: AdaptConfig::default(),
            fusion: FusionConfig::default(),
            synth: SynthShiftSpec::default(),
            data: DataPaths::default(),
            cache: CachePaths::default(),
            provider: ProviderSpec::CacheOnly,
            source_model: None,
            model: None,
            lr_scan: false,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Labeled source-domain data.
    pub source: Option<PathBuf>,
    /// Target-domain data used for adaptation; labels, if present, are ignored.
    pub target: Option<PathBuf>,
    /// Labeled target data: split into dev and test, and ground truth for the noisy oracle.
    pub target_labeled: Option<PathBuf>,
    /// Share of labeled data held out as the dev split.
    pub dev_fraction: f64,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            target_labeled: None,
            dev_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CachePaths {
    /// Samples drawn at `adapt.lalm_temperature`.
    pub sampled: PathBuf,
    /// Temperature-zero answers for single-generation fusion.
    pub greedy: PathBuf,
}

impl Default for CachePaths {
    fn default() -> Self {
        Self {
            sampled: PathBuf::from("cache/lalm_sampled.jsonl"),
            greedy: PathBuf::from("cache/lalm_greedy.jsonl"),
        }
    }
}

/// Where uncached teacher predictions come from. The remote endpoint and
/// token are read from the environment, never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    Remote {
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_backoff_ms")]
        initial_backoff_ms: u64,
    },
    CacheOnly,
    NoisyOracle(NoisyOracleConfig),
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    1000
}

impl RunConfig {
    /// Defaults, overlaid with the config file, then with `--set` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::missing(format!("cannot read config {}: {e}", path.display()))
            })?;
            let value: Value = serde_json::from_str(&text).map_err(|e| {
                CliError::config(format!("config {} is not valid JSON: {e}", path.display()))
            })?;
            merge(&mut tree, value);
        }
        for item in overrides {
            apply_override(&mut tree, item)?;
        }
        serde_json::from_value(tree).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |what: &str, r: mifuse::Result<()>| {
            r.map_err(|e| CliError::config(format!("{what}: {e}")))
        };
        wrap("adapt", self.adapt.validate())?;
        wrap("fusion", self.fusion.validate())?;
        wrap("synth", self.synth.validate())?;
        if let ProviderSpec::NoisyOracle(o) = &self.provider {
            wrap("provider", o.validate())?;
        }
        if !(0.0..1.0).contains(&self.data.dev_fraction) {
            return Err(CliError::config(format!(
                "data.dev_fraction {} outside [0, 1)",
                self.data.dev_fraction
            )));
        }
        Ok(())
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`, with `value` parsed as JSON when possible and taken as a
/// string otherwise. The key must already exist in the configuration.
fn apply_override(tree: &mut Value, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got {item:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *tree;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| CliError::config(format!("--set: unknown config key {key:?}")))?;
    }
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "adapt.batch_size=16".into(),
                "fusion.gate={\"kind\":\"kl\",\"tau\":0.6}".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.adapt.batch_size, 16);
        assert_eq!(cfg.fusion.gate, mifuse::fusion::Gate::Kl { tau: 0.6 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::resolve(None, &["adapt.batchsize=16".into()]).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("adapt.batchsize"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        for text in [
            r#"{"adapt": {"batchsize": 16}}"#,
            r#"{"synth": {"shift": {"rotation": 3}}}"#,
            r#"{"fusion": {"generation": "multi", "gate": {"kind": "direct"}, "weighting": "mi", "tau": 1}}"#,
            r#"{"provider": {"kind": "noisy_oracle", "accuracy": 0.7, "concentration": 5.0, "seed": 1, "x": 0}}"#,
        ] {
            fs::write(&path, text).unwrap();
            let err = RunConfig::resolve(Some(&path), &[]).unwrap_err();
            assert_eq!(err.code, 2, "{text}");
        }
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let oracle: RunConfig = serde_json::from_str(
            r#"{"provider": {"kind": "noisy_oracle", "accuracy": 0.7, "concentration": 5.0, "seed": 1}}"#,
        )
        .unwrap();
        assert!(matches!(oracle.provider, ProviderSpec::NoisyOracle(_)));
    }
}
