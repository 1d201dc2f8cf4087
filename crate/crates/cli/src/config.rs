use std::path::Path;

use anyhow::{bail, Context, Result};
use maskgraph::data_io::{DatasetConfig, SyntheticSpec};
use maskgraph::engine::{SnakeConfig, TrainConfig};
use maskgraph::model::ModelConfig;
use maskgraph::topology::TopologyMode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub touching: bool,
    /// Fraction of samples whose organ-2 annotation is withheld.
    pub missing_fraction: f64,
    pub shapes: SyntheticSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            size: 64,
            touching: false,
            missing_fraction: 0.0,
            shapes: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub mode: TopologyMode,
    /// Merge distance in pixels for unified graphs.
    pub delta: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            mode: TopologyMode::Independent,
            delta: std::f64::consts::SQRT_2 + 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_fraction: 0.2 }
    }
}

/// Everything a run needs; written to `config.resolved.json` beside every
/// output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub synth: SynthConfig,
    pub topology: TopologyConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub snake: SnakeConfig,
    pub split: SplitConfig,
}

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

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(UsageError(format!("override `{spec}` is not key=value")).into());
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("override `{key}`: `{}` is not an object", parts[..i].join("."));
        };
        if !map.contains_key(*part) {
            bail!("override `{key}`: unknown key `{part}`");
        }
        node = map.get_mut(*part).unwrap();
    }
    *node = value;
    Ok(())
}

impl RunConfig {
    /// Defaults, then the optional file, then overrides, then validation.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut value, patch);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).context("invalid config")?;
        cfg.dataset.validate()?;
        if cfg.model.input_size != cfg.dataset.input_size {
            bail!(
                "model.input_size {} differs from dataset.inputsize {}",
                cfg.model.input_size,
                cfg.dataset.input_size
            );
        }
        Ok(cfg)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.resolved.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::resolve(None, &["train.iterations=17".into(), "synth.touching=true".into()]).unwrap();
        assert_eq!(cfg.train.iterations, 17);
        assert!(cfg.synth.touching);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(None, &["train.iterationz=1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["nokey".into()]).unwrap_err().downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::resolve(None, &["dataset.scale_factor=0.2".into()]).unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
