//! The run configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SamplerConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::{PhaseSchedule, TrainOptions};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the model, sampler and split seeds.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub schedule: PhaseSchedule,
    pub train: TrainOptions,
    pub paths: Paths,
}

impl RunConfig {
    /// Small model and schedule sized for 96-pixel phantoms on a laptop.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig {
                levels: 3,
                base_channels: 8,
                image_size: 96,
                ..ModelConfig::default()
            },
            sampler: SamplerConfig::desk(),
            schedule: PhaseSchedule::desk(),
            ..Self::default()
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates `seed` into the sub-configurations.
    pub fn resolved(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.model.init_seed = seed;
            self.sampler.seed = seed;
            self.schedule.split_seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        self.schedule.validate()?;
        let div = 1usize << self.model.levels;
        if self.train.resample {
            if let Some(bad) = self.sampler.patch_sizes().into_iter().find(|d| d % div != 0) {
                return Err(Error::Config(format!(
                    "sampler.size_base/sampler.size_step give patch size {bad}, not divisible by 2^model.levels = {div}"
                )));
            }
            if self.sampler.d0 > self.model.image_size {
                return Err(Error::Config(format!(
                    "sampler.d0 = {} exceeds model.image_size = {}",
                    self.sampler.d0, self.model.image_size
                )));
            }
        }
        Ok(())
    }
}
