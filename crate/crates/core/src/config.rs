//! Run configuration file: one TOML table per component, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::GenConfig;
use crate::losses::LossWeights;
use crate::metrics::MboOrientation;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    /// Training videos.
    pub count: usize,
    pub frames: usize,
    /// Square frame side in pixels.
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 64,
            frames: 4,
            size: 64,
            min_objects: 1,
            max_objects: 4,
        }
    }
}

impl DataConfig {
    pub fn gen_config(&self, count: usize) -> GenConfig {
        GenConfig {
            batch: count,
            frames: self.frames,
            height: self.size,
            width: self.size,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub mbo: MboOrientation,
    /// Slot pairs sampled by theorem verification.
    pub pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![42, 101, 2048],
            mbo: MboOrientation::PerGroundTruth,
            pairs: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    /// Teacher pretraining; `kd_variant` and `match` are ignored.
    pub teacher_train: TrainConfig,
    /// Student training, with or without distillation.
    pub train: TrainConfig,
    pub losses: LossWeights,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            teacher: ModelConfig::teacher(),
            student: ModelConfig::student(),
            teacher_train: TrainConfig::default(),
            train: TrainConfig::default(),
            losses: LossWeights::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.data.gen_config(self.data.count).validate().map_err(|e| invalid(&e))?;
        self.teacher.validate().map_err(|e| invalid(&e))?;
        self.student.validate().map_err(|e| invalid(&e))?;
        self.teacher_train.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.losses.validate().map_err(|e| invalid(&e))?;
        if self.eval.seeds.is_empty() {
            return Err(ConfigError::Invalid("eval.seeds is empty".into()));
        }
        Ok(())
    }

    /// Fully resolved config, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved config text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
