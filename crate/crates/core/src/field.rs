//! The style-conditioned radiance field: Fourier encoding, modulated 1×1
//! blocks, foreground/background density heads and the shared color path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{norm, Vec3};
use crate::error::{config, Error, Result};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::styles::{Dense, LRELU_SLOPE};
use crate::tape::{Mat, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Fourier frequency count for positions.
    pub fourier_l: usize,
    /// Fourier frequency count for view directions (when enabled).
    pub dir_fourier_l: usize,
    /// Style blocks before the density head.
    pub n_sigma: usize,
    /// Style blocks before the color head; the last `n_c - n_sigma` run after
    /// aggregation on the approximate path.
    pub n_c: usize,
    pub hidden_fg: usize,
    pub hidden_bg: usize,
    pub bg_blocks: usize,
    pub color_hidden: usize,
    pub use_view_dirs: bool,
    /// Radius where the background starts.
    pub background_start: f64,
    /// Nonlinearity of the blocks shared by the color path and the 2D path.
    pub color_activation: Activation,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            fourier_l: 10,
            dir_fourier_l: 4,
            n_sigma: 4,
            n_c: 8,
            hidden_fg: 256,
            hidden_bg: 128,
            bg_blocks: 2,
            color_hidden: 64,
            use_view_dirs: false,
            background_start: 2.0,
            color_activation: Activation::LeakyRelu,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fourier_l == 0 {
            return Err(config("fourier_l must be at least 1"));
        }
        if !(self.n_c > self.n_sigma && self.n_sigma >= 1) {
            return Err(config(format!(
                "need n_c > n_sigma >= 1, got n_sigma={} n_c={}",
                self.n_sigma, self.n_c
            )));
        }
        if self.hidden_fg == 0 || self.hidden_bg == 0 || self.color_hidden == 0 {
            return Err(config("field widths must be positive"));
        }
        if self.bg_blocks == 0 || self.bg_blocks > self.n_sigma {
            return Err(config("bg_blocks must lie in 1..=n_sigma"));
        }
        if self.background_start <= 1.0 {
            return Err(config("background_start must exceed the unit foreground radius"));
        }
        Ok(())
    }
}

/// `[sin(2^k x), cos(2^k x)]` for `k = 0..L`, per scalar, concatenated.
pub fn fourier_features(x: &[f64], l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * 2 * l);
    for &v in x {
        let mut f = 1.0;
        for _ in 0..l {
            let (s, c) = (f * v).sin_cos();
            out.push(s);
            out.push(c);
            f *= 2.0;
        }
    }
    out
}

fn fourier_matrix(rows: &[&[f64]], l: usize) -> Mat {
    let width = rows.first().map_or(0, |r| r.len()) * 2 * l;
    let mut m = Mat::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in fourier_features(r, l).into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

/// `(x/r, y/r, z/r, 1/r)` for points outside the unit sphere.
pub fn invert_sphere(p: Vec3) -> Result<[f64; 4]> {
    let r = norm(p);
    if !(r >= 1.0) {
        return Err(Error::Domain(format!(
            "point at radius {r} lies inside the foreground sphere"
        )));
    }
    Ok([p[0] / r, p[1] / r, p[2] / r, 1.0 / r])
}

/// Style-modulated 1×1 convolution.
#[derive(Clone, Debug)]
pub struct ModulatedBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub affine: Dense,
    pub fan_in: usize,
    pub fan_out: usize,
    pub demodulate: bool,
    pub activation: Activation,
    pub eps: f64,
}

impl ModulatedBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w_dim: usize,
        fan_in: usize,
        fan_out: usize,
        demodulate: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(
            format!("{name}.weight"),
            Group::Synthesis,
            (fan_out, fan_in),
            1.0,
            rng,
        );
        let bias = store.add_const(format!("{name}.bias"), Group::Synthesis, (1, fan_out), 0.0);
        let affine = Dense::build(store, &format!("{name}.affine"), Group::Synthesis, w_dim, fan_in, rng);
        store.get_mut(affine.bias).fill(1.0);
        Self {
            weight,
            bias,
            affine,
            fan_in,
            fan_out,
            demodulate,
            activation,
            eps: 1e-8,
        }
    }

    /// Per-input-channel style scales, `1×in`.
    pub fn styles(&self, ctx: &mut Ctx, w: Var) -> Var {
        self.affine.forward(ctx, w)
    }

    /// Modulated (and optionally demodulated) `out×in` weight.
    pub fn modulated_weight(&self, ctx: &mut Ctx, w: Var) -> Var {
        let s = self.styles(ctx, w);
        let weight = ctx.p(self.weight);
        let wm = ctx.tape.mul_row(weight, s);
        let wm = ctx.tape.scale(wm, 1.0 / (self.fan_in as f64).sqrt());
        if !self.demodulate {
            return wm;
        }
        let sq = ctx.tape.square(wm);
        let norm2 = ctx.tape.sum_cols(sq);
        let norm2 = ctx.tape.add_scalar(norm2, self.eps);
        let inv = ctx.tape.pow(norm2, -0.5);
        ctx.tape.mul_col(wm, inv)
    }

    /// Applies the block to every row (spatial site) of `x`. `noise`, when
    /// given, is an `rows×1` map added before the activation.
    pub fn forward(&self, ctx: &mut Ctx, w: Var, x: Var, noise: Option<Var>) -> Var {
        let wm = self.modulated_weight(ctx, w);
        let y = ctx.tape.matmul_t(x, wm, false, true);
        let b = ctx.p(self.bias);
        let mut y = ctx.tape.add_row(y, b);
        if let Some(n) = noise {
            let n = ctx.tape.broadcast_cols(n, self.fan_out);
            y = ctx.tape.add(y, n);
        }
        match self.activation {
            Activation::LeakyRelu => ctx.tape.leaky_relu(y, LRELU_SLOPE),
            Activation::Identity => y,
        }
    }
}

/// Per-point field outputs as tape nodes.
pub struct FieldEval {
    /// `P×1`, nonnegative.
    pub sigma: Var,
    /// `P×D` features feeding aggregation.
    pub features: Var,
    /// `P×3` per-point color, when requested.
    pub color: Option<Var>,
    /// Activations of each density-trunk block, for instrumentation.
    pub trunk: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FieldNet {
    pub cfg: FieldConfig,
    pub fg_blocks: Vec<ModulatedBlock>,
    pub fg_density: Dense,
    pub bg_blocks: Vec<ModulatedBlock>,
    pub bg_density: Dense,
    /// Blocks `n_sigma+1..=n_c`, shared by the per-point color path and the
    /// 2D feature path.
    pub color_trunk: Vec<ModulatedBlock>,
    pub color_head: Vec<Dense>,
    pub color_channels: usize,
}

impl FieldNet {
    /// `color_channels` is the post-aggregation width at base resolution.
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &FieldConfig,
        w_dim: usize,
        color_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let act = Activation::LeakyRelu;
        let h = cfg.hidden_fg;
        let fg_in = 3 * 2 * cfg.fourier_l;
        let fg_blocks = (0..cfg.n_sigma)
            .map(|i| {
                let fan_in = if i == 0 { fg_in } else { h };
                ModulatedBlock::build(store, &format!("field.fg{i}"), w_dim, fan_in, h, true, act, rng)
            })
            .collect();
        let fg_density = Dense::build(store, "field.fg_sigma", Group::Synthesis, h, 1, rng);
        let bg_in = 4 * 2 * cfg.fourier_l;
        let bg_blocks = (0..cfg.bg_blocks)
            .map(|i| {
                let fan_in = if i == 0 { bg_in } else { cfg.hidden_bg };
                let fan_out = if i + 1 == cfg.bg_blocks { h } else { cfg.hidden_bg };
                ModulatedBlock::build(store, &format!("field.bg{i}"), w_dim, fan_in, fan_out, true, act, rng)
            })
            .collect();
        let bg_density = Dense::build(store, "field.bg_sigma", Group::Synthesis, h, 1, rng);
        let c = color_channels;
        let color_trunk = (0..cfg.n_c - cfg.n_sigma)
            .map(|i| {
                let fan_in = if i == 0 { h } else { c };
                ModulatedBlock::build(
                    store,
                    &format!("field.color{i}"),
                    w_dim,
                    fan_in,
                    c,
                    true,
                    cfg.color_activation,
                    rng,
                )
            })
            .collect();
        let head_in = c + if cfg.use_view_dirs { 3 * 2 * cfg.dir_fourier_l } else { 0 };
        let color_head = vec![
            Dense::build(store, "field.rgb0", Group::Synthesis, head_in, cfg.color_hidden, rng),
            Dense::build(store, "field.rgb1", Group::Synthesis, cfg.color_hidden, 3, rng),
        ];
        Ok(Self {
            cfg: cfg.clone(),
            fg_blocks,
            fg_density,
            bg_blocks,
            bg_density,
            color_trunk,
            color_head,
            color_channels: c,
        })
    }

    /// Number of style rows consumed before and through the color trunk.
    pub fn style_layers(&self) -> usize {
        self.cfg.n_c
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.hidden_fg
    }

    fn density(&self, ctx: &mut Ctx, head: &Dense, features: Var) -> Var {
        let raw = head.forward(ctx, features);
        ctx.tape.softplus(raw)
    }

    /// Evaluates the foreground field. `styles[i]` is the `1×w_dim` row for
    /// style layer `i`.
    pub fn eval_foreground(
        &self,
        ctx: &mut Ctx,
        points: &[Vec3],
        dirs: &[Vec3],
        styles: &[Var],
        want_color: bool,
    ) -> Result<FieldEval> {
        for p in points {
            if norm(*p) > 1.0 + 1e-9 {
                return Err(Error::Domain(format!(
                    "foreground point at radius {} lies outside the unit sphere",
                    norm(*p)
                )));
            }
        }
        let rows: Vec<&[f64]> = points.iter().map(|p| &p[..]).collect();
        let enc = ctx.tape.leaf(fourier_matrix(&rows, self.cfg.fourier_l));
        let mut x = enc;
        let mut trunk = Vec::with_capacity(self.fg_blocks.len());
        for (i, block) in self.fg_blocks.iter().enumerate() {
            x = block.forward(ctx, styles[i], x, None);
            trunk.push(x);
        }
        let sigma = self.density(ctx, &self.fg_density, x);
        let color = if want_color {
            Some(self.point_color(ctx, x, dirs, styles)?)
        } else {
            None
        };
        Ok(FieldEval {
            sigma,
            features: x,
            color,
            trunk,
        })
    }

    /// Evaluates the background field over inverted-sphere coordinates.
    pub fn eval_background(
        &self,
        ctx: &mut Ctx,
        points: &[Vec3],
        dirs: &[Vec3],
        styles: &[Var],
        want_color: bool,
    ) -> Result<FieldEval> {
        let inv = points
            .iter()
            .map(|p| invert_sphere(*p))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<&[f64]> = inv.iter().map(|p| &p[..]).collect();
        let mut x = ctx.tape.leaf(fourier_matrix(&rows, self.cfg.fourier_l));
        let mut trunk = Vec::with_capacity(self.bg_blocks.len());
        for (i, block) in self.bg_blocks.iter().enumerate() {
            x = block.forward(ctx, styles[i], x, None);
            trunk.push(x);
        }
        let sigma = self.density(ctx, &self.bg_density, x);
        let color = if want_color {
            Some(self.point_color(ctx, x, dirs, styles)?)
        } else {
            None
        };
        Ok(FieldEval {
            sigma,
            features: x,
            color,
            trunk,
        })
    }

    /// Blocks `n_sigma+1..=n_c` over feature rows; `noise[k]` is added to
    /// block `k` when present.
    pub fn color_trunk_forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        styles: &[Var],
        noise: &[Option<Var>],
    ) -> Var {
        let mut x = x;
        for (k, block) in self.color_trunk.iter().enumerate() {
            let n = noise.get(k).copied().flatten();
            x = block.forward(ctx, styles[self.cfg.n_sigma + k], x, n);
        }
        x
    }

    /// `h_c` over trunk outputs, with encoded directions appended if enabled.
    pub fn color_head_forward(&self, ctx: &mut Ctx, x: Var, dirs: &[Vec3]) -> Result<Var> {
        let mut input = x;
        if self.cfg.use_view_dirs {
            let rows = ctx.tape.shape(x).0;
            if dirs.len() != rows {
                return Err(Error::Argument(format!(
                    "{} directions for {rows} feature rows",
                    dirs.len()
                )));
            }
            let drows: Vec<&[f64]> = dirs.iter().map(|d| &d[..]).collect();
            let enc = ctx.tape.leaf(fourier_matrix(&drows, self.cfg.dir_fourier_l));
            input = ctx.tape.concat_cols(&[x, enc]);
        }
        let h = self.color_head[0].forward(ctx, input);
        let h = match self.cfg.color_activation {
            Activation::LeakyRelu => ctx.tape.leaky_relu(h, LRELU_SLOPE),
            Activation::Identity => h,
        };
        Ok(self.color_head[1].forward(ctx, h))
    }

    fn point_color(&self, ctx: &mut Ctx, features: Var, dirs: &[Vec3], styles: &[Var]) -> Result<Var> {
        let x = self.color_trunk_forward(ctx, features, styles, &[]);
        self.color_head_forward(ctx, x, dirs)
    }
}
