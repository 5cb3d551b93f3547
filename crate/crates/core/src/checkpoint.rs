//! JSON checkpoint: run configuration, normalization statistics and every
//! parameter array.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{Sefnet, SefnetParams};
use crate::tensor::BnRunning;
use crate::train::RunConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub regions: Vec<String>,
    pub norm_stats: NormStats,
    pub bn_running: Vec<BnRunning>,
    /// `name → {shape, values}`.
    pub params: SefnetParams,
}

impl Checkpoint {
    pub fn new(config: RunConfig, regions: Vec<String>, norm_stats: NormStats, model: &Sefnet) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: RunConfig {
                model: model.config.clone(),
                ..config
            },
            regions,
            norm_stats,
            bn_running: model.bn_running.clone(),
            params: model.params.clone(),
        }
    }

    pub fn model(&self) -> Result<Sefnet> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint format {}",
                self.format_version
            )));
        }
        if self.regions.len() != self.config.model.regions || self.norm_stats.num_regions() != self.regions.len() {
            return Err(Error::config("checkpoint region count is inconsistent"));
        }
        Sefnet::from_parts(self.config.model.clone(), self.params.clone(), self.bn_running.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
