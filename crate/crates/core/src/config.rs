//! Top-level configuration, loaded from TOML. Every section falls back to
//! its defaults when omitted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{DiscriminatorConfig, LossConfig};
use crate::error::{config, Result};
use crate::generator::GeneratorConfig;
use crate::params::AdamConfig;
use crate::schedule::ProgressiveSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    SyntheticSpheres,
    ImageFolder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub resolution: usize,
    /// Images generated for the synthetic source.
    pub count: usize,
    pub center_crop: bool,
    pub seed: u64,
    /// Sphere radius range for the synthetic source.
    pub sphere_radius: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::SyntheticSpheres,
            path: None,
            resolution: 256,
            count: 512,
            center_crop: true,
            seed: 0,
            sphere_radius: (0.22, 0.3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    pub schedule: ProgressiveSchedule,
    pub dataset: DatasetConfig,
    pub adam: AdamConfig,
    pub batch: usize,
    /// Half-life of the parameter average, in images.
    pub ema_half_life: f64,
    /// Decay of the running mean style per step.
    pub w_avg_beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossConfig::default(),
            schedule: ProgressiveSchedule::default(),
            dataset: DatasetConfig::default(),
            adam: AdamConfig::default(),
            batch: 8,
            ema_half_life: 500.0,
            w_avg_beta: 0.995,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config(e.to_string()))
    }

    /// Copies the generator's resolutions into the discriminator and the
    /// schedule, then validates.
    pub fn resolved(mut self) -> Result<Self> {
        let (b, t) = (self.generator.base_resolution, self.generator.target_resolution);
        self.discriminator.base_resolution = b;
        self.discriminator.target_resolution = t;
        self.schedule.base_resolution = b;
        self.schedule.target_resolution = t;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.batch == 0 {
            return Err(config("batch must be positive"));
        }
        if self.dataset.resolution < self.generator.target_resolution {
            return Err(config(format!(
                "dataset resolution {} is below the target resolution {}",
                self.dataset.resolution, self.generator.target_resolution
            )));
        }
        if !(self.ema_half_life > 0.0) {
            return Err(config("ema_half_life must be positive"));
        }
        Ok(())
    }

    /// Per-step decay of the parameter average.
    pub fn ema_beta(&self) -> f64 {
        0.5f64.powf(self.batch as f64 / self.ema_half_life)
    }
}
