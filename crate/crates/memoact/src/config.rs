//! TOML experiment configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use memoact_core::envs::TaskId;
use memoact_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::FormatError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root for datasets, checkpoints, metrics and ablation cells.
    pub output_dir: PathBuf,
    pub tasks: Vec<String>,
    /// Training seeds; `train` uses the first.
    pub seeds: Vec<u64>,
    pub data: DataSection,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Expert demonstrations per task.
    pub demos: usize,
    pub seed: u64,
}

/// Training hyperparameters plus the variant and its capacities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub variant: String,
    pub batch_size: usize,
    pub chunk: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub short_capacity: Option<usize>,
    pub long_capacity: Option<usize>,
    pub consolidate_count: Option<usize>,
    pub eval_every: usize,
    pub eval_trials: usize,
    pub ema_decay: f64,
    pub cosine_lr: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            tasks: TaskId::ALL.iter().map(|t| t.name().to_string()).collect(),
            seeds: vec![0, 1, 2],
            data: DataSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self { demos: 200, seed: 1000 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from_core(&TrainConfig::default())
    }
}

impl TrainSection {
    pub fn from_core(c: &TrainConfig) -> Self {
        Self {
            variant: c.variant.clone(),
            batch_size: c.batch_size,
            chunk: c.chunk,
            epochs: c.epochs,
            lr: c.lr,
            seed: c.seed,
            short_capacity: c.short_capacity,
            long_capacity: c.long_capacity,
            consolidate_count: c.consolidate_count,
            eval_every: c.eval_every,
            eval_trials: c.eval_trials,
            ema_decay: c.ema_decay,
            cosine_lr: c.cosine_lr,
        }
    }

    pub fn to_core(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            chunk: self.chunk,
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            variant: self.variant.clone(),
            short_capacity: self.short_capacity,
            long_capacity: self.long_capacity,
            consolidate_count: self.consolidate_count,
            eval_every: self.eval_every,
            eval_trials: self.eval_trials,
            ema_decay: self.ema_decay,
            cosine_lr: self.cosine_lr,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let cfg: Self = toml::from_str(text).map_err(|e| FormatError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        self.task_ids()?;
        if self.seeds.is_empty() {
            return Err(FormatError::Config("seeds must not be empty".into()));
        }
        if self.data.demos == 0 {
            return Err(FormatError::Config("data.demos must be at least 1".into()));
        }
        self.train.to_core().validate()?;
        Ok(())
    }

    pub fn task_ids(&self) -> Result<Vec<TaskId>, FormatError> {
        self.tasks
            .iter()
            .map(|t| TaskId::parse(t).ok_or_else(|| FormatError::Config(format!("unknown task {t:?}"))))
            .collect()
    }
}
