//! Latent sampling, the mapping network and style-space operations.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg, config, Result};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::tape::{Mat, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StylesConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    /// Learning-rate multiplier of the mapping network relative to synthesis.
    pub mapping_lr_mul: f64,
    /// Probability of style-mixing regularization during training.
    pub mixing_prob: f64,
    /// Pull towards the running mean style; `1.0` disables truncation.
    pub truncation_psi: f64,
}

impl Default for StylesConfig {
    fn default() -> Self {
        Self {
            z_dim: 512,
            w_dim: 512,
            mapping_layers: 8,
            mapping_lr_mul: 0.01,
            mixing_prob: 0.0,
            truncation_psi: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentZ(pub Vec<f64>);

impl LatentZ {
    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleVector(pub Vec<f64>);

impl StyleVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn as_row(&self) -> Mat {
        Mat::from_shape_vec((1, self.0.len()), self.0.clone()).expect("row")
    }
}

/// One style vector per style-consuming layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleStack {
    pub rows: Vec<StyleVector>,
}

impl StyleStack {
    pub fn layer_count(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, StyleVector::dim)
    }
}

pub fn broadcast(w: &StyleVector, layer_count: usize) -> Result<StyleStack> {
    if layer_count == 0 {
        return Err(arg("layer_count must be at least 1"));
    }
    Ok(StyleStack {
        rows: vec![w.clone(); layer_count],
    })
}

/// Style-mixing request: layers below `crossover_layer` use `style_a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingSpec {
    pub style_a: StyleStack,
    pub style_b: StyleStack,
    pub crossover_layer: usize,
}

impl MixingSpec {
    pub fn resolve(&self) -> Result<StyleStack> {
        mix(&self.style_a, &self.style_b, self.crossover_layer)
    }
}

pub fn mix(a: &StyleStack, b: &StyleStack, crossover: usize) -> Result<StyleStack> {
    if a.layer_count() != b.layer_count() {
        return Err(arg(format!(
            "cannot mix stacks of {} and {} layers",
            a.layer_count(),
            b.layer_count()
        )));
    }
    if crossover > a.layer_count() {
        return Err(arg(format!(
            "crossover {crossover} exceeds layer count {}",
            a.layer_count()
        )));
    }
    let rows = a.rows[..crossover]
        .iter()
        .chain(&b.rows[crossover..])
        .cloned()
        .collect();
    Ok(StyleStack { rows })
}

/// `(1 − t)·a + t·b`, strict about `t ∈ [0, 1]`.
pub fn interpolate(a: &StyleVector, b: &StyleVector, t: f64) -> Result<StyleVector> {
    if !(0.0..=1.0).contains(&t) {
        return Err(arg(format!("interpolation weight {t} outside [0, 1]")));
    }
    if a.dim() != b.dim() {
        return Err(arg(format!("style dims differ: {} vs {}", a.dim(), b.dim())));
    }
    Ok(StyleVector(
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect(),
    ))
}

pub fn interpolate_stack(a: &StyleStack, b: &StyleStack, t: f64) -> Result<StyleStack> {
    if a.layer_count() != b.layer_count() {
        return Err(arg("stacks differ in layer count"));
    }
    let rows = a
        .rows
        .iter()
        .zip(&b.rows)
        .map(|(x, y)| interpolate(x, y, t))
        .collect::<Result<_>>()?;
    Ok(StyleStack { rows })
}

/// `mean + ψ·(w − mean)`.
pub fn truncate(w: &StyleVector, mean: &StyleVector, psi: f64) -> StyleVector {
    StyleVector(
        w.0.iter()
            .zip(&mean.0)
            .map(|(x, m)| m + psi * (x - m))
            .collect(),
    )
}

pub(crate) const LRELU_SLOPE: f64 = 0.2;

/// Equalized-learning-rate fully connected layer: `y = x·(W/√in)ᵀ + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
}

impl Dense {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), group, (fan_out, fan_in), 1.0, rng);
        let bias = store.add_const(format!("{name}.bias"), group, (1, fan_out), 0.0);
        Self {
            weight,
            bias,
            fan_in,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.tape.matmul_t(x, w, false, true);
        let y = ctx.tape.scale(y, 1.0 / (self.fan_in as f64).sqrt());
        ctx.tape.add_row(y, b)
    }

    /// Plain evaluation of one input row.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight);
        let b = store.get(self.bias);
        let gain = 1.0 / (self.fan_in as f64).sqrt();
        (0..w.nrows())
            .map(|o| {
                let dot: f64 = w.row(o).iter().zip(x).map(|(a, b)| a * b).sum();
                dot * gain + b[[0, o]]
            })
            .collect()
    }
}

/// `f: Z → W`; leaky-ReLU hidden layers and a linear output layer.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub layers: Vec<Dense>,
    pub z_dim: usize,
    pub w_dim: usize,
}

impl MappingNetwork {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &StylesConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.mapping_layers == 0 || cfg.z_dim == 0 || cfg.w_dim == 0 {
            return Err(config("mapping network needs positive depth and widths"));
        }
        let layers = (0..cfg.mapping_layers)
            .map(|i| {
                let fan_in = if i == 0 { cfg.z_dim } else { cfg.w_dim };
                Dense::build(store, &format!("mapping.fc{i}"), Group::Mapping, fan_in, cfg.w_dim, rng)
            })
            .collect();
        Ok(Self {
            layers,
            z_dim: cfg.z_dim,
            w_dim: cfg.w_dim,
        })
    }

    /// Maps a batch of latents (one per row).
    pub fn forward(&self, ctx: &mut Ctx, z: Var) -> Var {
        let n = ctx.tape.shape(z).1 as f64;
        let sq = ctx.tape.square(z);
        let ms = ctx.tape.sum_cols(sq);
        let ms = ctx.tape.scale(ms, 1.0 / n);
        let ms = ctx.tape.add_scalar(ms, 1e-8);
        let inv = ctx.tape.pow(ms, -0.5);
        let mut x = ctx.tape.mul_col(z, inv);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x);
            if i != last {
                x = ctx.tape.leaky_relu(x, LRELU_SLOPE);
            }
        }
        x
    }

    pub fn map_latent(&self, store: &ParamStore, z: &LatentZ) -> Result<StyleVector> {
        if z.dim() != self.z_dim {
            return Err(config(format!(
                "latent has {} entries, mapping network expects {}",
                z.dim(),
                self.z_dim
            )));
        }
        let mut ctx = Ctx::new(store);
        let zv = ctx.tape.row_leaf(&z.0);
        let w = self.forward(&mut ctx, zv);
        Ok(StyleVector(ctx.tape.value(w).iter().copied().collect()))
    }
}
