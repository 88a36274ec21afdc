//! The single JSON run configuration and its `--set key=value` overrides.

use std::path::Path;

use lens_core::data::DataConfig;
use lens_core::lab::{ModeThresholds, Pooling, TsneConfig, RECALL_IOUS};
use lens_core::train::PipelineConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
    pub analysis: AnalysisConfig,
    pub server: ServerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Split used by dumps and evaluation commands.
    pub split: String,
    /// Cap on the number of samples dumped (`None`: the whole split).
    pub limit: Option<usize>,
    pub theta: f64,
    pub modes: ModeThresholds,
    pub pooling: Pooling,
    pub alphas: Vec<f64>,
    pub tsne: TsneConfig,
    /// Samples embedded by `analyze tsne`.
    pub tsne_samples: usize,
    pub prune_fractions: Vec<f64>,
    pub prune_seeds: Vec<u64>,
    pub recall_ious: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            split: "val".into(),
            limit: Some(1000),
            theta: 0.9,
            modes: ModeThresholds::default(),
            pooling: Pooling::Rows,
            alphas: (1..=20).map(|i| i as f64 / 20.0).collect(),
            tsne: TsneConfig::default(),
            tsne_samples: 600,
            prune_fractions: (0..=8).map(|i| i as f64 / 8.0).collect(),
            prune_seeds: vec![0, 1, 2, 3, 4],
            recall_ious: RECALL_IOUS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    /// What-if forwards allowed in flight at once.
    pub whatif_concurrency: usize,
    /// Allowed CORS origin; `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { whatif_concurrency: 4, cors_origin: None }
    }
}

impl LabConfig {
    /// Reads `path` (if any), applies `overrides` and `seed`, and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let file = match file {
                Value::Object(mut m) => {
                    m.remove("format_version");
                    Value::Object(m)
                }
                _ => return Err(Error::Config(format!("{}: expected a JSON object", p.display()))),
            };
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            config.set_seed(s);
        }
        config.validate()?;
        Ok(config)
    }

    /// One seed drives data generation, initialization, shuffling and t-SNE.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.pipeline.oracle.seed = seed;
        self.pipeline.finetune.seed = seed;
        self.analysis.tsne.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: lens_core::LensError| Error::Config(e.to_string());
        self.data.validate().map_err(cfg)?;
        self.pipeline.oracle.validate().map_err(cfg)?;
        self.pipeline.finetune.validate().map_err(cfg)?;
        let a = &self.analysis;
        if !(0.0..=1.0).contains(&a.theta) {
            return Err(Error::Config(format!("analysis.theta = {} is outside [0, 1]", a.theta)));
        }
        if !["train", "val", "test", "test-dev"].contains(&a.split.as_str()) {
            return Err(Error::Config(format!("analysis.split `{}` is not a split", a.split)));
        }
        if a.prune_fractions.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("analysis.prune_fractions must lie in [0, 1]".into()));
        }
        if self.server.whatif_concurrency == 0 {
            return Err(Error::Config("server.whatif_concurrency must be positive".into()));
        }
        Ok(())
    }
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

/// Applies `a.b.c=value`. The value is parsed as JSON and falls back to a
/// plain string; the path must name an existing field.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for key in path.split('.') {
        slot = match slot {
            Value::Object(m) => m.get_mut(key),
            Value::Array(a) => key.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("override `{path}`: no field `{key}`")))?;
    }
    *slot = value;
    Ok(())
}
