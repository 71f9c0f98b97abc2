//! One JSON config file drives the whole pipeline: data generation, model
//! architecture, warm-up, and self-training. All keys are snake_case and
//! every section falls back to its defaults when omitted.

use crate::data::DataConfig;
use crate::error::Result;
use crate::model::EncoderConfig;
use crate::trainer::TrainConfig;
use crate::warmup::WarmupConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CoastConfig {
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
}

impl CoastConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
