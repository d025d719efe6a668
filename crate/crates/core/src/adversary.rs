//! Convolutional discriminator with progressive fade-in, and the loss terms:
//! non-saturating GAN loss, R1 penalty and the NeRF-path regularizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, config, Result};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::schedule::doublings;
use crate::styles::{Dense, LRELU_SLOPE};
use crate::tape::{softplus, Mat, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_resolution: usize,
    pub target_resolution: usize,
    pub channel_base: usize,
    pub channel_max: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_resolution: 32,
            target_resolution: 256,
            channel_base: 32 * 1024,
            channel_max: 512,
        }
    }
}

impl DiscriminatorConfig {
    pub fn channels(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// R1 weight λ.
    pub r1_gamma: f64,
    /// NeRF-path weight β.
    pub nerf_beta: f64,
    /// Pixels sampled for the NeRF-path term.
    pub nerf_pixels: usize,
    /// R1 is applied every this many steps, scaled by the interval.
    pub r1_interval: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            r1_gamma: 0.5,
            nerf_beta: 0.2,
            nerf_pixels: 64,
            r1_interval: 16,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r1_gamma < 0.0 || self.nerf_beta < 0.0 {
            return Err(config("loss weights must be nonnegative"));
        }
        if self.nerf_pixels == 0 || self.r1_interval == 0 {
            return Err(config("nerf_pixels and r1_interval must be positive"));
        }
        Ok(())
    }
}

/// Equalized 3×3 convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
}

impl Conv3 {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), group, (cout, 9 * cin), 1.0, rng);
        let bias = store.add_const(format!("{name}.bias"), group, (1, cout), 0.0);
        Self {
            weight,
            bias,
            fan_in: 9 * cin,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, h: usize, w: usize) -> Var {
        let cols = ctx.tape.im2col3(x, h, w);
        let wt = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.tape.matmul_t(cols, wt, false, true);
        let y = ctx.tape.scale(y, 1.0 / (self.fan_in as f64).sqrt());
        ctx.tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct DBlock {
    pub resolution: usize,
    pub conv0: Conv3,
    pub conv1: Conv3,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    /// 1×1 projections from RGB, one per resolution (largest first).
    pub from_rgb: Vec<(usize, Dense)>,
    /// Downsampling blocks, largest resolution first, ending at 8.
    pub blocks: Vec<DBlock>,
    pub fc: Dense,
    pub out: Dense,
}

/// Coarsest feature grid before the dense head.
pub const D_FINAL: usize = 4;

impl Discriminator {
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        doublings(cfg.base_resolution, cfg.target_resolution)?;
        if cfg.base_resolution < D_FINAL || !cfg.base_resolution.is_power_of_two() {
            return Err(config(format!(
                "discriminator resolutions must be powers of two of at least {D_FINAL}"
            )));
        }
        let mut from_rgb = Vec::new();
        let mut blocks = Vec::new();
        let mut r = cfg.target_resolution;
        while r >= D_FINAL {
            let c = cfg.channels(r);
            if r >= cfg.base_resolution {
                from_rgb.push((r, Dense::build(store, &format!("disc.from_rgb{r}"), Group::Discriminator, 3, c, rng)));
            }
            if r > D_FINAL {
                let c2 = cfg.channels(r / 2);
                blocks.push(DBlock {
                    resolution: r,
                    conv0: Conv3::build(store, &format!("disc.b{r}.conv0"), Group::Discriminator, c, c, rng),
                    conv1: Conv3::build(store, &format!("disc.b{r}.conv1"), Group::Discriminator, c, c2, rng),
                });
            }
            r /= 2;
        }
        let c4 = cfg.channels(D_FINAL);
        let fc = Dense::build(store, "disc.fc", Group::Discriminator, D_FINAL * D_FINAL * c4, c4, rng);
        let out = Dense::build(store, "disc.out", Group::Discriminator, c4, 1, rng);
        Ok(Self {
            cfg: cfg.clone(),
            from_rgb,
            blocks,
            fc,
            out,
        })
    }

    fn from_rgb(&self, ctx: &mut Ctx, img: Var, res: usize) -> Result<Var> {
        let layer = self
            .from_rgb
            .iter()
            .find(|(r, _)| *r == res)
            .map(|(_, d)| d)
            .ok_or_else(|| arg(format!("no input layer for resolution {res}")))?;
        let y = layer.forward(ctx, img);
        Ok(ctx.tape.leaky_relu(y, LRELU_SLOPE))
    }

    fn block(&self, ctx: &mut Ctx, x: Var, res: usize) -> Var {
        let b = self
            .blocks
            .iter()
            .find(|b| b.resolution == res)
            .expect("block exists for every resolution above the head");
        let y = b.conv0.forward(ctx, x, res, res);
        let y = ctx.tape.leaky_relu(y, LRELU_SLOPE);
        let y = b.conv1.forward(ctx, y, res, res);
        let y = ctx.tape.leaky_relu(y, LRELU_SLOPE);
        ctx.tape.avg_pool2(y, res, res)
    }

    /// Logit for an `res²×3` image. With `alpha < 1` the top block is blended
    /// with the downsampled image's path.
    pub fn forward(&self, ctx: &mut Ctx, img: Var, res: usize, alpha: f64) -> Result<Var> {
        let (rows, c) = ctx.tape.shape(img);
        if rows != res * res || c != 3 {
            return Err(arg(format!("image of shape {rows}×{c} is not {res}×{res}×3")));
        }
        if res > self.cfg.target_resolution || res < D_FINAL || !res.is_power_of_two() {
            return Err(arg(format!("discriminator cannot score resolution {res}")));
        }
        let mut x = self.from_rgb(ctx, img, res)?;
        let mut r = res;
        if r > D_FINAL {
            x = self.block(ctx, x, r);
            if alpha < 1.0 {
                let small = ctx.tape.avg_pool2(img, r, r);
                let y = self.from_rgb(ctx, small, r / 2)?;
                x = ctx.tape.lerp(y, x, alpha);
            }
            r /= 2;
        }
        while r > D_FINAL {
            x = self.block(ctx, x, r);
            r /= 2;
        }
        let c4 = ctx.tape.shape(x).1;
        let flat = ctx.tape.reshape(x, 1, D_FINAL * D_FINAL * c4);
        let h = self.fc.forward(ctx, flat);
        let h = ctx.tape.leaky_relu(h, LRELU_SLOPE);
        Ok(self.out.forward(ctx, h))
    }

    pub fn discriminate(&self, store: &ParamStore, image: &Mat, res: usize) -> Result<f64> {
        let mut ctx = Ctx::new(store);
        let v = ctx.tape.leaf(image.clone());
        let s = self.forward(&mut ctx, v, res, 1.0)?;
        Ok(ctx.tape.scalar(s))
    }
}

/// `f(u) = −log(1 + e^{−u})`, overflow-free.
pub fn gan_f(u: f64) -> f64 {
    -softplus(-u)
}

/// Mean generator and discriminator losses:
/// `g = −E f(D(fake))`, `d = −E f(−D(fake)) − E f(D(real))`.
pub fn gan_losses(fake: &[f64], real: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|x| f(*x)).sum::<f64>() / v.len() as f64
        }
    };
    let g = mean(fake, &|u| -gan_f(u));
    let d = mean(fake, &|u| -gan_f(-u)) + mean(real, &|u| -gan_f(u));
    (g, d)
}

/// `softplus(−s)` on the tape: generator loss for one fake score.
pub fn g_loss_var(ctx: &mut Ctx, score: Var) -> Var {
    let n = ctx.tape.neg(score);
    ctx.tape.softplus(n)
}

/// `softplus(s_fake) + softplus(−s_real)` on the tape.
pub fn d_loss_var(ctx: &mut Ctx, fake: Var, real: Var) -> Var {
    let a = ctx.tape.softplus(fake);
    let nr = ctx.tape.neg(real);
    let b = ctx.tape.softplus(nr);
    ctx.tape.add(a, b)
}

/// `λ‖∇_I D(I)‖²` for one real image, kept differentiable in D's
/// parameters. Returns `(penalty, score)`.
pub fn r1_penalty(
    ctx: &mut Ctx,
    d: &Discriminator,
    real: Var,
    res: usize,
    alpha: f64,
    gamma: f64,
) -> Result<(Var, Var)> {
    let score = d.forward(ctx, real, res, alpha)?;
    let g = ctx.tape.grad(score, &[real]);
    let pen = match g[0] {
        Some(gv) => {
            let sq = ctx.tape.square(gv);
            let s = ctx.tape.sum(sq);
            ctx.tape.scale(s, gamma)
        }
        None => ctx.tape.scalar_leaf(0.0),
    };
    Ok((pen, score))
}

/// Mean over `pixels` (low-res indices) of the channel-summed squared
/// difference between aligned approximate and per-point pixels.
pub fn nerf_path_loss(
    ctx: &mut Ctx,
    approx: Var,
    nerf: Var,
    index_map: &[usize],
    pixels: &[usize],
) -> Result<Var> {
    if pixels.is_empty() {
        return Err(arg("NeRF-path loss needs at least one sampled pixel"));
    }
    let hi: Vec<usize> = pixels.iter().map(|&p| index_map[p]).collect();
    let a = ctx.tape.gather_rows(approx, &hi);
    let b = ctx.tape.gather_rows(nerf, pixels);
    let diff = ctx.tape.sub(a, b);
    let sq = ctx.tape.square(diff);
    let s = ctx.tape.sum(sq);
    Ok(ctx.tape.scale(s, 1.0 / pixels.len() as f64))
}

/// Plain-valued form of [`nerf_path_loss`].
pub fn nerf_path_loss_values(approx: &Mat, nerf: &Mat, index_map: &[usize], pixels: &[usize]) -> Result<f64> {
    if pixels.is_empty() {
        return Err(arg("NeRF-path loss needs at least one sampled pixel"));
    }
    let mut total = 0.0;
    for &p in pixels {
        let a = approx.row(index_map[p]);
        let b = nerf.row(p);
        total += a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total / pixels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_resolution: 8,
            target_resolution: 16,
            channel_base: 64,
            channel_max: 8,
        }
    }

    #[test]
    fn f_values_and_asymptotics() {
        assert!((gan_f(0.0) + std::f64::consts::LN_2).abs() < 1e-12);
        assert!((gan_f(-100.0) + 100.0).abs() < 1e-12);
        assert!(gan_f(100.0) < 0.0 && (gan_f(100.0) + (-100.0f64).exp()).abs() < 1e-50);
        let (g, d) = gan_losses(&[1e6, -1e6], &[1e6, -1e6]);
        assert!(g.is_finite() && d.is_finite());
    }

    #[test]
    fn zeroed_head_scores_its_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let d = Discriminator::build(&mut store, &small(), &mut rng).unwrap();
        store.get_mut(d.out.weight).fill(0.0);
        store.get_mut(d.out.bias).fill(0.3);
        for seed in 0..3 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let img = Mat::from_shape_simple_fn((256, 3), || r.random_range(-1.0..1.0));
            assert_eq!(d.discriminate(&store, &img, 16).unwrap(), 0.3);
        }
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let d = Discriminator::build(&mut store, &small(), &mut rng).unwrap();
        assert!(d.discriminate(&store, &Mat::zeros((64, 3)), 16).is_err());
        assert!(d.discriminate(&store, &Mat::zeros((32 * 32, 3)), 32).is_err());
    }

    #[test]
    fn nerf_path_single_pixel_difference() {
        let approx = Mat::zeros((16, 3));
        let mut nerf = Mat::zeros((4, 3));
        nerf[[2, 1]] = 0.5;
        let map = crate::camera::aligned_index_map(2, 4, 2);
        let v = nerf_path_loss_values(&approx, &nerf, &map, &[0, 1, 2, 3]).unwrap();
        assert!((v - 0.25 / 4.0).abs() < 1e-15);
        assert!(nerf_path_loss_values(&approx, &nerf, &map, &[]).is_err());
    }
}
