use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::LossMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scores::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience_epochs: usize,
    pub max_epochs: usize,
    /// One training run per seed.
    pub seeds: Vec<u64>,
    pub loss: LossMode,
    /// Tasks contributing to the loss.
    pub tasks: Vec<Task>,
    /// Bias maps are applied only where prediction–label correlation
    /// reaches this value.
    pub bias_min_r: f64,
    /// Validate on condition means instead of files.
    pub val_per_condition: bool,
    /// Stop as soon as validation PCC reaches this value.
    pub target_val_pcc: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 160,
            lr: 1e-3,
            patience_epochs: 10,
            max_epochs: 200,
            seeds: vec![0],
            loss: LossMode::BiasAware,
            tasks: Task::ALL.to_vec(),
            bias_min_r: 0.7,
            val_per_condition: false,
            target_val_pcc: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.tasks.is_empty() {
            return bad("tasks must not be empty");
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(Error::Config(format!("task {t} listed twice")));
            }
        }
        if !(-1.0..=1.0).contains(&self.bias_min_r) {
            return bad("bias_min_r must lie in [-1, 1]");
        }
        self.model.validate()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}
