//! 2× feature-grid upsamplers. Grids are pixel-major `(H·W)×C` matrices
//! with row index `y·W + x`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, config, Result};
use crate::field::fourier_features;
use crate::params::{Ctx, Group, ParamStore};
use crate::styles::{Dense, LRELU_SLOPE};
use crate::tape::{Function, Mat, Var};

/// Default low-pass taps, applied separably.
pub const BLUR_TAPS: [f64; 4] = [1.0 / 8.0, 3.0 / 8.0, 3.0 / 8.0, 1.0 / 8.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplerKind {
    Hybrid,
    Bilinear,
    Coordinate,
}

impl std::str::FromStr for UpsamplerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "bilinear" => Ok(Self::Bilinear),
            "coordinate" => Ok(Self::Coordinate),
            other => Err(arg(format!("unknown upsampler kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpsamplerConfig {
    pub kind: UpsamplerKind,
    /// 1D taps; the 2D kernel is their outer product.
    pub blur: Vec<f64>,
    /// Fourier frequencies of the pixel coordinates (coordinate variant).
    pub coord_fourier_l: usize,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        Self {
            kind: UpsamplerKind::Hybrid,
            blur: BLUR_TAPS.to_vec(),
            coord_fourier_l: 4,
        }
    }
}

impl UpsamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blur.is_empty() || self.blur.iter().any(|k| *k < 0.0) {
            return Err(config("blur taps must be nonnegative and non-empty"));
        }
        if (self.blur.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(config("blur taps must sum to 1"));
        }
        Ok(())
    }
}

/// Sparse per-axis resampling: `out[o] = Σ (i, w) in taps[o] · in[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    pub len_in: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisTaps {
    pub fn len_out(&self) -> usize {
        self.taps.len()
    }

    /// Same-size filtering with edge replication; for an even kernel of
    /// length `k`, `k/2 − 1` taps sit before the center and `k/2` after.
    pub fn blur(n: usize, kernel: &[f64]) -> Self {
        let before = (kernel.len().saturating_sub(1)) / 2;
        let taps = (0..n)
            .map(|o| {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
                for (k, w) in kernel.iter().enumerate() {
                    let i = (o as isize + k as isize - before as isize).clamp(0, n as isize - 1) as usize;
                    match row.iter_mut().find(|(j, _)| *j == i) {
                        Some(e) => e.1 += w,
                        None => row.push((i, *w)),
                    }
                }
                row
            })
            .collect();
        Self { len_in: n, taps }
    }

    pub fn nearest2(n: usize) -> Self {
        Self {
            len_in: n,
            taps: (0..2 * n).map(|o| vec![(o / 2, 1.0)]).collect(),
        }
    }

    /// Half-pixel-centered linear interpolation with edge replication.
    pub fn bilinear2(n: usize) -> Self {
        let last = n as isize - 1;
        let c = |i: isize| i.clamp(0, last) as usize;
        let taps = (0..2 * n)
            .map(|o| {
                let m = (o / 2) as isize;
                let (a, b) = if o % 2 == 0 { (m - 1, m) } else { (m, m + 1) };
                let (wa, wb) = if o % 2 == 0 { (0.25, 0.75) } else { (0.75, 0.25) };
                if c(a) == c(b) {
                    vec![(c(a), 1.0)]
                } else {
                    vec![(c(a), wa), (c(b), wb)]
                }
            })
            .collect();
        Self { len_in: n, taps }
    }

    /// 2× box downsampling.
    pub fn box_down2(n: usize) -> Self {
        Self {
            len_in: n,
            taps: (0..n / 2).map(|o| vec![(2 * o, 0.5), (2 * o + 1, 0.5)]).collect(),
        }
    }

    /// `self` after `first` (first applied first).
    pub fn compose(first: &AxisTaps, then: &AxisTaps) -> Self {
        debug_assert_eq!(first.len_out(), then.len_in);
        let taps = then
            .taps
            .iter()
            .map(|row| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for (mid, w1) in row {
                    for (i, w0) in &first.taps[*mid] {
                        match acc.iter_mut().find(|(j, _)| j == i) {
                            Some(e) => e.1 += w1 * w0,
                            None => acc.push((*i, w1 * w0)),
                        }
                    }
                }
                acc
            })
            .collect();
        Self {
            len_in: first.len_in,
            taps,
        }
    }
}

/// Separable linear resampling of a grid.
#[derive(Clone, Debug)]
pub struct Resample {
    pub rows: AxisTaps,
    pub cols: AxisTaps,
}

impl Resample {
    pub fn apply(&self, x: &Mat) -> Mat {
        let (hi, wi) = (self.rows.len_in, self.cols.len_in);
        let (ho, wo) = (self.rows.len_out(), self.cols.len_out());
        let c = x.ncols();
        debug_assert_eq!(x.nrows(), hi * wi);
        // Columns first, into an hi × wo intermediate.
        let mut mid = Mat::zeros((hi * wo, c));
        for y in 0..hi {
            for (xo, taps) in self.cols.taps.iter().enumerate() {
                let mut dst = mid.row_mut(y * wo + xo);
                for (xi, w) in taps {
                    dst.scaled_add(*w, &x.row(y * wi + xi));
                }
            }
        }
        let mut out = Mat::zeros((ho * wo, c));
        for (yo, taps) in self.rows.taps.iter().enumerate() {
            for (yi, w) in taps {
                for xo in 0..wo {
                    let src = mid.row(yi * wo + xo);
                    out.row_mut(yo * wo + xo).scaled_add(*w, &src);
                }
            }
        }
        out
    }

    pub fn adjoint(&self, g: &Mat) -> Mat {
        let (hi, wi) = (self.rows.len_in, self.cols.len_in);
        let wo = self.cols.len_out();
        let c = g.ncols();
        let mut mid = Mat::zeros((hi * wo, c));
        for (yo, taps) in self.rows.taps.iter().enumerate() {
            for (yi, w) in taps {
                for xo in 0..wo {
                    let src = g.row(yo * wo + xo);
                    mid.row_mut(yi * wo + xo).scaled_add(*w, &src);
                }
            }
        }
        let mut out = Mat::zeros((hi * wi, c));
        for y in 0..hi {
            for (xo, taps) in self.cols.taps.iter().enumerate() {
                let src = mid.row(y * wo + xo).to_owned();
                for (xi, w) in taps {
                    out.row_mut(y * wi + xi).scaled_add(*w, &src);
                }
            }
        }
        out
    }

    pub fn record(&self, ctx: &mut Ctx, x: Var) -> Var {
        let value = self.apply(ctx.tape.value(x));
        ctx.tape.custom(&[x], value, Box::new(self.clone()))
    }
}

impl Function for Resample {
    fn name(&self) -> &'static str {
        "resample"
    }

    fn backward(&self, _inputs: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        vec![Some(self.adjoint(grad))]
    }
}

/// Nearest 2× followed by the blur: the ψ-free hybrid path.
pub fn nearest_blur(n: usize, kernel: &[f64]) -> Resample {
    let axis = AxisTaps::compose(&AxisTaps::nearest2(n), &AxisTaps::blur(2 * n, kernel));
    Resample {
        rows: axis.clone(),
        cols: axis,
    }
}

pub fn blur(n: usize, kernel: &[f64]) -> Resample {
    let axis = AxisTaps::blur(n, kernel);
    Resample {
        rows: axis.clone(),
        cols: axis,
    }
}

pub fn nearest(n: usize) -> Resample {
    Resample {
        rows: AxisTaps::nearest2(n),
        cols: AxisTaps::nearest2(n),
    }
}

pub fn bilinear(n: usize) -> Resample {
    Resample {
        rows: AxisTaps::bilinear2(n),
        cols: AxisTaps::bilinear2(n),
    }
}

pub fn box_down(n: usize) -> Resample {
    Resample {
        rows: AxisTaps::box_down2(n),
        cols: AxisTaps::box_down2(n),
    }
}

/// Each channel copied four times in place: channel `4c + s` holds `c`.
pub fn repeat_interleave(x: &Mat) -> Mat {
    let (p, c) = x.dim();
    Mat::from_shape_fn((p, 4 * c), |(i, j)| x[[i, j / 4]])
}

/// Row permutation implementing depth-to-space by 2: input element
/// `(y·W + x, 4c + 2i + j)` lands at `((2y+i)·2W + 2x + j, c)`.
pub fn pixel_shuffle_index(n: usize, c: usize) -> Vec<usize> {
    let w2 = 2 * n;
    let mut idx = vec![0; 4 * n * n * c];
    for y in 0..n {
        for x in 0..n {
            for ch in 0..c {
                for i in 0..2 {
                    for j in 0..2 {
                        let src = (y * n + x) * 4 * c + ch * 4 + 2 * i + j;
                        let dst = ((2 * y + i) * w2 + 2 * x + j) * c + ch;
                        idx[dst] = src;
                    }
                }
            }
        }
    }
    idx
}

pub fn pixel_shuffle(x: &Mat, n: usize) -> Mat {
    let c = x.ncols() / 4;
    let flat: Vec<f64> = x.iter().copied().collect();
    let idx = pixel_shuffle_index(n, c);
    Mat::from_shape_fn((4 * n * n, c), |(r, ch)| flat[idx[r * c + ch]])
}

pub fn pixel_shuffle_var(ctx: &mut Ctx, x: Var, n: usize) -> Var {
    let (p, c4) = ctx.tape.shape(x);
    let c = c4 / 4;
    let col = ctx.tape.reshape(x, p * c4, 1);
    let g = ctx.tape.gather_rows(col, &pixel_shuffle_index(n, c));
    ctx.tape.reshape(g, 4 * n * n, c)
}

/// Normalized pixel-center coordinates of an `n×n` grid, one row per pixel.
pub fn pixel_coords(n: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let c = |k: usize| -1.0 + (2 * k + 1) as f64 / n as f64;
            out.push([c(x), c(y)]);
        }
    }
    out
}

/// A learned 2× upsampler for `channels`-wide grids.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub cfg: UpsamplerConfig,
    pub channels: usize,
    /// ψ: `D → D → 4D` (hybrid) or `(D + coords) → D → 4D` (coordinate).
    pub psi: Vec<Dense>,
}

impl Upsampler {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &UpsamplerConfig,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = channels;
        let psi = match cfg.kind {
            UpsamplerKind::Bilinear => Vec::new(),
            UpsamplerKind::Hybrid => {
                let l0 = Dense::build(store, &format!("{name}.psi0"), Group::Synthesis, d, d, rng);
                let l1 = Dense::build(store, &format!("{name}.psi1"), Group::Synthesis, d, 4 * d, rng);
                // Start as the fixed nearest+blur operator.
                store.get_mut(l1.weight).fill(0.0);
                vec![l0, l1]
            }
            UpsamplerKind::Coordinate => {
                let extra = 2 * 2 * cfg.coord_fourier_l;
                let l0 = Dense::build(store, &format!("{name}.psi0"), Group::Synthesis, d + extra, d, rng);
                let l1 = Dense::build(store, &format!("{name}.psi1"), Group::Synthesis, d, 4 * d, rng);
                vec![l0, l1]
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            psi,
        })
    }

    fn psi_forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.psi[0].forward(ctx, x);
        let h = ctx.tape.leaky_relu(h, LRELU_SLOPE);
        let y = self.psi[1].forward(ctx, h);
        let (_, c) = ctx.tape.shape(y);
        if c != 4 * self.channels {
            return Err(config(format!(
                "psi produced {c} channels, expected {}",
                4 * self.channels
            )));
        }
        Ok(y)
    }

    /// Upsamples an `n×n` grid to `2n×2n`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, n: usize) -> Result<Var> {
        let (p, c) = ctx.tape.shape(x);
        if n == 0 || p != n * n {
            return Err(arg(format!("grid of {p} rows is not {n}×{n}")));
        }
        if c != self.channels {
            return Err(config(format!(
                "upsampler expects {} channels, got {c}",
                self.channels
            )));
        }
        match self.cfg.kind {
            UpsamplerKind::Hybrid => {
                // Shuffle(Repeat(X) + ψ(X)) = Nearest(X) + Shuffle(ψ(X)).
                let up = nearest(n).record(ctx, x);
                let psi = self.psi_forward(ctx, x)?;
                let sh = pixel_shuffle_var(ctx, psi, n);
                let y = ctx.tape.add(up, sh);
                Ok(blur(2 * n, &self.cfg.blur).record(ctx, y))
            }
            UpsamplerKind::Bilinear => Ok(bilinear(n).record(ctx, x)),
            UpsamplerKind::Coordinate => {
                let enc: Vec<f64> = pixel_coords(n)
                    .iter()
                    .flat_map(|p| fourier_features(p, self.cfg.coord_fourier_l))
                    .collect();
                let width = enc.len() / (n * n);
                let enc = ctx
                    .tape
                    .leaf(Mat::from_shape_vec((n * n, width), enc).expect("coordinate encoding"));
                let input = ctx.tape.concat_cols(&[x, enc]);
                let psi = self.psi_forward(ctx, input)?;
                Ok(pixel_shuffle_var(ctx, psi, n))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_simple_fn((n * n, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn blur_taps_are_normalized_with_replicated_edges() {
        let a = AxisTaps::blur(4, &BLUR_TAPS);
        for row in &a.taps {
            assert!((row.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(a.taps[0], vec![(0, 0.5), (1, 0.375), (2, 0.125)]);
    }

    #[test]
    fn interleaved_repeat_then_shuffle_is_nearest() {
        let x = grid(3, 2, 0);
        let a = pixel_shuffle(&repeat_interleave(&x), 3);
        let b = nearest(3).apply(&x);
        assert_eq!(a, b);
    }

    #[test]
    fn shuffle_places_subpixels() {
        // One pixel, one channel: channels [a, b, c, d] → 2×2 [[a, b], [c, d]].
        let x = Mat::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 1);
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn adjoint_matches_inner_product() {
        let r = nearest_blur(3, &BLUR_TAPS);
        let x = grid(3, 2, 1);
        let g = grid(6, 2, 2);
        let lhs: f64 = r.apply(&x).iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(r.adjoint(&g).iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!("lanczos".parse::<UpsamplerKind>().is_err());
        assert_eq!("bilinear".parse::<UpsamplerKind>().unwrap(), UpsamplerKind::Bilinear);
    }

    #[test]
    fn fresh_hybrid_is_nearest_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let up = Upsampler::build(&mut store, "up", &UpsamplerConfig::default(), 3, &mut rng).unwrap();
        let x = grid(4, 3, 4);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.tape.leaf(x.clone());
        let y = up.forward(&mut ctx, xv, 4).unwrap();
        let want = nearest_blur(4, &BLUR_TAPS).apply(&x);
        let diff = (ctx.tape.value(y) - &want).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
        assert!(diff < 1e-12);
    }

    #[test]
    fn wrong_channel_count_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let up = Upsampler::build(&mut store, "up", &UpsamplerConfig::default(), 3, &mut rng).unwrap();
        let mut ctx = Ctx::new(&store);
        let xv = ctx.tape.leaf(grid(2, 4, 0));
        assert!(matches!(up.forward(&mut ctx, xv, 2), Err(crate::Error::Config(_))));
    }
}
