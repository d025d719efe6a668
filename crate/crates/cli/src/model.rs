//! A frozen generator ready for inference, plus the style recipe shared by
//! the CLI and the service.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stylefield::camera::CameraPose;
use stylefield::config::TrainConfig;
use stylefield::generator::{Generator, RenderedImage};
use stylefield::params::ParamStore;
use stylefield::styles::{broadcast, mix, StyleStack, StyleVector};
use stylefield::trainer::{checkpoint_load, TrainState};
use stylefield::{Error, Result};

pub struct LoadedModel {
    /// Checkpoint file stem, or `untrained` for a freshly built model.
    pub id: String,
    pub cfg: TrainConfig,
    pub generator: Generator,
    /// Averaged weights, used for every render.
    pub store: ParamStore,
    pub step: u64,
}

impl LoadedModel {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let st = checkpoint_load(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        Ok(Self::from_state(st, id))
    }

    /// Randomly initialized model; deterministic in `cfg.seed`.
    pub fn fresh(cfg: TrainConfig) -> Result<Self> {
        Ok(Self::from_state(TrainState::new(cfg)?, "untrained".into()))
    }

    fn from_state(st: TrainState, id: String) -> Self {
        let TrainState {
            cfg, model, ema, step, ..
        } = st;
        Self {
            id,
            cfg,
            generator: model.generator,
            store: ema,
            step,
        }
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.cfg.generator.resolutions()
    }

    pub fn layer_count(&self) -> usize {
        self.generator.layer_count()
    }

    pub fn style(&self, seed: u64, psi: f64) -> Result<StyleVector> {
        self.generator.style_for_seed(&self.store, seed, psi)
    }

    /// Mean pose unless an angle is given; radius and fov default to the camera config.
    pub fn pose(&self, theta: Option<f64>, phi: Option<f64>, radius: Option<f64>, fov: Option<f64>) -> Result<CameraPose> {
        let cam = &self.cfg.generator.camera;
        let mean = cam.mean_pose();
        CameraPose::new(
            theta.unwrap_or(mean.theta),
            phi.unwrap_or(mean.phi),
            radius.unwrap_or(mean.radius),
            fov.unwrap_or(mean.fov),
        )
    }

    pub fn check_resolution(&self, res: usize) -> Result<()> {
        let chain = self.resolutions();
        if chain.contains(&res) {
            Ok(())
        } else {
            Err(Error::Argument(format!("resolution {res} is not in the supported chain {chain:?}")))
        }
    }

    pub fn stack(&self, spec: &StyleSpec) -> Result<StyleStack> {
        let psi = spec.truncation.unwrap_or(1.0);
        if !psi.is_finite() {
            return Err(Error::Argument("truncation must be finite".into()));
        }
        let w = match (spec.seed, &spec.w) {
            (Some(seed), None) => self.style(seed, psi)?,
            (None, Some(w)) => {
                let dim = self.cfg.generator.styles.w_dim;
                if w.len() != dim {
                    return Err(Error::Argument(format!("w has {} entries, the model expects {dim}", w.len())));
                }
                let w = StyleVector(w.clone());
                if !w.is_finite() {
                    return Err(Error::Argument("w has non-finite entries".into()));
                }
                if psi == 1.0 {
                    w
                } else {
                    let mean = StyleVector(self.store.get(self.generator.w_avg).iter().copied().collect());
                    stylefield::styles::truncate(&w, &mean, psi)
                }
            }
            _ => return Err(Error::Argument("give exactly one of seed or w".into())),
        };
        let a = broadcast(&w, self.layer_count())?;
        match &spec.mixing {
            None => Ok(a),
            Some(m) => {
                let b = broadcast(&self.style(m.seed_b, psi)?, self.layer_count())?;
                mix(&a, &b, m.crossover_layer)
            }
        }
    }

    pub fn render(&self, spec: &StyleSpec, pose: &CameraPose, res: usize) -> Result<RenderedImage> {
        self.check_resolution(res)?;
        let stack = self.stack(spec)?;
        self.generator.render(&self.store, &stack, pose, res, None)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSpec {
    pub seed_b: u64,
    pub crossover_layer: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub w: Option<Vec<f64>>,
    #[serde(default)]
    pub mixing: Option<MixingSpec>,
    #[serde(default)]
    pub truncation: Option<f64>,
}

impl StyleSpec {
    pub fn seed(seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..Default::default()
        }
    }
}

/// Hex SHA-256 of the little-endian bytes of `w`.
pub fn style_digest(w: &StyleVector) -> String {
    let mut h = Sha256::new();
    for v in &w.0 {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
