//! JSON run configuration. Every field is optional and unknown keys are
//! rejected with the path of the offending key.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::eval::EvalConfig;
use crate::geometry::{PoseMode, ShapeConfig, ShapeKind};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config error at `{path}`: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    pub points: usize,
    pub seed: u64,
    pub param_jitter: f64,
    pub pose: PoseMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = ShapeConfig::with_classes(6, 100, 256, 0);
        Self {
            classes: 6,
            per_class: s.per_category,
            points: s.points,
            seed: s.seed,
            param_jitter: s.param_jitter,
            pose: s.pose,
        }
    }
}

impl DataConfig {
    pub fn shape_config(&self) -> ShapeConfig {
        ShapeConfig {
            categories: ShapeKind::ALL.iter().take(self.classes).map(|k| k.name().to_string()).collect(),
            per_category: self.per_class,
            points: self.points,
            seed: self.seed,
            param_jitter: self.param_jitter,
            pose: self.pose,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.data.classes > ShapeKind::ALL.len() {
            return Err(ConfigError::Invalid(format!(
                "data.classes must be at most {}",
                ShapeKind::ALL.len()
            )));
        }
        self.data.shape_config().validate().map_err(|e| inv(&e))?;
        self.augment.validate().map_err(|e| inv(&e))?;
        self.model.validate().map_err(|e| inv(&e))?;
        self.loss.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        self.eval.validate().map_err(|e| inv(&e))?;
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
