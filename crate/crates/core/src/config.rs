//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TaskSpec;
use crate::masking::SparsityConfig;
use crate::nn::{BackboneConfig, InputSpec, ModelError, ModelSpec};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config key `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub t_grid: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { t_grid: vec![0.3, 0.38, 0.46, 0.54, 0.62, 0.7], targets: vec![0.25, 0.5, 0.75] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch: 1, warmup: 10, reps: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub sparsity: SparsityConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
    pub precision: Precision,
    /// Worker threads; only 1 is guaranteed to be bitwise reproducible.
    pub threads: usize,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            model: BackboneConfig::default(),
            train: TrainConfig::default(),
            sparsity: SparsityConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
            precision: Precision::F32,
            threads: 1,
            output: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Parses JSON, naming the full key path of any offending entry.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Parse { path, message: e.into_inner().to_string() }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.task.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        self.sparsity.validate().map_err(invalid)?;
        self.model_spec().map_err(|e| invalid(e.to_string()))?;
        if self.threads == 0 {
            return Err(invalid("threads must be >= 1".into()));
        }
        if self.sweep.t_grid.is_empty() || self.sweep.t_grid.iter().any(|t| !t.is_finite()) {
            return Err(invalid("sweep.t_grid must be a non-empty list of finite values".into()));
        }
        if self.sweep.targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(invalid("sweep.targets must lie in [0, 1]".into()));
        }
        if self.bench.reps < 3 {
            return Err(invalid("bench.reps must be >= 3".into()));
        }
        if self.bench.batch == 0 {
            return Err(invalid("bench.batch must be >= 1".into()));
        }
        Ok(())
    }

    /// Input shape produced by the configured task's feature extractor.
    pub fn input_spec(&self) -> InputSpec {
        let fs = crate::data::FeatureSpec::default();
        InputSpec { frames: fs.frames(self.task.clip_len), features: fs.bins }
    }

    /// Model with a head sized for the task (headless for the pretext task).
    pub fn model_spec(&self) -> Result<ModelSpec, ModelError> {
        self.model.build_spec(self.input_spec(), self.task.task.outputs())
    }

    /// Pretty JSON with every default written out.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
