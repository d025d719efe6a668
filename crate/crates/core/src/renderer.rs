//! Volume rendering by alpha compositing, stratified and hierarchical
//! sampling, feature aggregation and the per-point color path.
//!
//! Discretization: `α_i = 1 − exp(−σ_i δ_i)`, `T_i = Π_{j<i}(1 − α_j)`,
//! `weight_i = T_i α_i`, with `δ_i = t_{i+1} − t_i` and the last foreground
//! interval closed at the ray's far bound. Background samples continue the
//! same transmittance; the last one is treated as opaque-capable with a very
//! long interval.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{point_on_ray, sphere_interval, RayBundle, Vec3};
use crate::error::{arg, Result};
use crate::field::FieldNet;
use crate::params::Ctx;
use crate::tape::{Function, Mat, Var};

/// Interval length assigned to the final background sample.
pub const BACKGROUND_LAST_DELTA: f64 = 1e10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Coarse foreground samples per ray.
    pub n_coarse: usize,
    /// Importance samples per ray.
    pub n_importance: usize,
    /// Background samples per ray.
    pub n_background: usize,
    pub stratified: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_coarse: 32,
            n_importance: 32,
            n_background: 16,
            stratified: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 {
            return Err(arg("at least one coarse sample per ray is required"));
        }
        Ok(())
    }

    pub fn foreground_per_ray(&self) -> usize {
        self.n_coarse + self.n_importance
    }

    pub fn per_ray(&self) -> usize {
        self.foreground_per_ray() + self.n_background
    }

    pub fn deterministic(&self) -> Self {
        Self {
            stratified: false,
            ..self.clone()
        }
    }
}

/// `n` increasing depths in `[near, far)`: one per equal bin, jittered when
/// `stratified`, else bin midpoints.
pub fn stratified_samples<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    n: usize,
    rng: &mut R,
    stratified: bool,
) -> Result<Vec<f64>> {
    if !(near < far) {
        return Err(arg(format!("near {near} must be below far {far}")));
    }
    let step = (far - near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let u = if stratified { rng.random::<f64>() } else { 0.5 };
            near + (i as f64 + u) * step
        })
        .collect())
}

/// Bin boundaries around sorted coarse samples: midpoints plus the ends.
pub fn bin_edges(t: &[f64], near: f64, far: f64) -> Vec<f64> {
    let mut edges = Vec::with_capacity(t.len() + 1);
    edges.push(near);
    for w in t.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(far);
    edges
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceDraw {
    pub t: Vec<f64>,
    /// Set when every weight was zero and a uniform distribution was used.
    pub fallback: bool,
}

/// Inverse-CDF sampling from the piecewise-constant distribution with
/// `weights[k]` on `[edges[k], edges[k+1])`. Without an rng the quantiles
/// `(j + 0.5)/m` are used.
pub fn importance_samples<R: Rng + ?Sized>(
    edges: &[f64],
    weights: &[f64],
    m: usize,
    rng: Option<&mut R>,
) -> ImportanceDraw {
    debug_assert_eq!(edges.len(), weights.len() + 1);
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let fallback = !(total > 0.0) || !total.is_finite();
    let pdf: Vec<f64> = if fallback {
        // Uniform in depth, not per bin.
        edges
            .windows(2)
            .map(|e| (e[1] - e[0]) / (edges[edges.len() - 1] - edges[0]))
            .collect()
    } else {
        weights.iter().map(|w| w.max(0.0) / total).collect()
    };
    let mut cdf = Vec::with_capacity(pdf.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p;
        cdf.push(acc);
    }
    let mut rng = rng;
    let mut t = Vec::with_capacity(m);
    for j in 0..m {
        let jitter = match rng.as_deref_mut() {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        let u = ((j as f64 + jitter) / m as f64) * acc;
        let k = match cdf[1..].iter().position(|&c| u < c) {
            Some(k) => k,
            None => pdf.len() - 1,
        };
        let k = (0..=k).rev().find(|&i| pdf[i] > 0.0).unwrap_or(k);
        let frac = if pdf[k] > 0.0 {
            ((u - cdf[k]) / pdf[k]).clamp(0.0, 1.0)
        } else {
            0.5
        };
        t.push(edges[k] + frac * (edges[k + 1] - edges[k]));
    }
    ImportanceDraw { t, fallback }
}

/// Depths of `g` background samples, uniform in inverse radius over
/// `(0, 1/start]` and increasing along the ray.
pub fn background_samples<R: Rng + ?Sized>(
    o: Vec3,
    d: Vec3,
    g: usize,
    start: f64,
    rng: &mut R,
    stratified: bool,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(g);
    for k in 0..g {
        // Bin k from the inner radius outwards.
        let u = if stratified { rng.random::<f64>() } else { 0.5 };
        let inv_r = (1.0 - (k as f64 + u) / g as f64) / start;
        let r = 1.0 / inv_r.max(1e-12);
        let t = match sphere_interval(o, d, r) {
            Some((_, t1)) => t1,
            None => r,
        };
        out.push(t);
    }
    out
}

/// Compositing weights and the transmittance left after each sample.
pub fn alpha_weights(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut weights = Vec::with_capacity(sigma.len());
    let mut after = Vec::with_capacity(sigma.len());
    let mut optical = 0.0;
    let mut trans = 1.0;
    for (s, d) in sigma.iter().zip(delta) {
        optical += s * d;
        let next = (-optical).exp();
        weights.push(trans - next);
        after.push(next);
        trans = next;
    }
    (weights, after)
}

pub fn deltas(t: &[f64], end: f64) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(last) = t.last() {
        d.push(end - last);
    }
    d
}

/// Result of compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub weights: Vec<f64>,
    /// Transmittance reaching each sample.
    pub transmittance: Vec<f64>,
    /// `Σ weight_i · value_i`.
    pub aggregated: Vec<f64>,
    pub depth: f64,
    pub accumulated_alpha: f64,
}

/// Composites per-sample `values` along one ray. `end` closes the last
/// interval.
pub fn composite(sigma: &[f64], t: &[f64], end: f64, values: &[Vec<f64>]) -> Result<RenderOutput> {
    if sigma.len() != t.len() || values.len() != t.len() {
        return Err(arg("sigma, t and values must have equal lengths"));
    }
    if t.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(arg("t-values must be strictly increasing"));
    }
    let d = deltas(t, end);
    let (weights, after) = alpha_weights(sigma, &d);
    let dim = values.first().map_or(0, Vec::len);
    let mut aggregated = vec![0.0; dim];
    for (w, v) in weights.iter().zip(values) {
        for (a, x) in aggregated.iter_mut().zip(v) {
            *a += w * x;
        }
    }
    let mut transmittance = Vec::with_capacity(t.len());
    transmittance.push(1.0);
    transmittance.extend_from_slice(&after[..after.len().saturating_sub(1)]);
    let acc: f64 = weights.iter().sum();
    let depth = if acc > 0.0 {
        weights.iter().zip(t).map(|(w, t)| w * t).sum::<f64>() / acc
    } else {
        end
    };
    Ok(RenderOutput {
        weights,
        transmittance,
        aggregated,
        depth,
        accumulated_alpha: acc,
    })
}

/// Renders one ray through analytic density and value functions using the
/// same coarse + importance sampling as the network path.
pub fn render_analytic_ray<R: Rng + ?Sized>(
    density: &dyn Fn(Vec3) -> f64,
    value: &dyn Fn(Vec3) -> f64,
    o: Vec3,
    d: Vec3,
    near: f64,
    far: f64,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<RenderOutput> {
    let coarse = stratified_samples(near, far, cfg.n_coarse, rng, cfg.stratified)?;
    let sig: Vec<f64> = coarse.iter().map(|t| density(point_on_ray(o, d, *t))).collect();
    let (w, _) = alpha_weights(&sig, &deltas(&coarse, far));
    let mut all = coarse.clone();
    if cfg.n_importance > 0 {
        let edges = bin_edges(&coarse, near, far);
        let draw = if cfg.stratified {
            importance_samples(&edges, &w, cfg.n_importance, Some(rng))
        } else {
            importance_samples::<R>(&edges, &w, cfg.n_importance, None)
        };
        all.extend(draw.t);
    }
    all.sort_by(f64::total_cmp);
    all.dedup();
    let sig: Vec<f64> = all.iter().map(|t| density(point_on_ray(o, d, *t))).collect();
    let vals: Vec<Vec<f64>> = all
        .iter()
        .map(|t| vec![value(point_on_ray(o, d, *t))])
        .collect();
    composite(&sig, &all, far, &vals)
}

/// Counts field evaluations by network.
#[derive(Debug, Default)]
pub struct EvalCounter {
    pub foreground: AtomicU64,
    pub background: AtomicU64,
}

impl EvalCounter {
    pub fn add_foreground(&self, n: usize) {
        self.foreground.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn add_background(&self, n: usize) {
        self.background.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn foreground(&self) -> u64 {
        self.foreground.load(Ordering::Relaxed)
    }

    pub fn background(&self) -> u64 {
        self.background.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.foreground() + self.background()
    }
}

/// Field-evaluation budget of the aggregated path versus per-pixel rendering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationBudget {
    pub output_resolution: usize,
    pub base_resolution: usize,
    pub approx_foreground: u64,
    pub approx_background: u64,
    pub approx_total: u64,
    pub full_total: u64,
    /// `full_total / approx_total` as an exact fraction.
    pub ratio_num: u64,
    pub ratio_den: u64,
}

impl EvaluationBudget {
    pub fn ratio(&self) -> f64 {
        self.ratio_num as f64 / self.ratio_den as f64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn count_evaluations(
    output_resolution: usize,
    base_resolution: usize,
    cfg: &SamplingConfig,
) -> EvaluationBudget {
    let base_px = (base_resolution * base_resolution) as u64;
    let out_px = (output_resolution * output_resolution) as u64;
    let approx_foreground = base_px * cfg.foreground_per_ray() as u64;
    let approx_background = base_px * cfg.n_background as u64;
    let approx_total = approx_foreground + approx_background;
    let full_total = out_px * cfg.per_ray() as u64;
    let g = gcd(full_total, approx_total).max(1);
    EvaluationBudget {
        output_resolution,
        base_resolution,
        approx_foreground,
        approx_background,
        approx_total,
        full_total,
        ratio_num: full_total / g,
        ratio_den: approx_total / g,
    }
}

/// Compositing weights over rows of `σ` (`R×S`) with constant intervals.
struct CompositeWeights {
    delta: Mat,
}

impl Function for CompositeWeights {
    fn name(&self) -> &'static str {
        "composite_weights"
    }

    fn backward(&self, inputs: &[&Mat], output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let sigma = inputs[0];
        let (r, s) = sigma.dim();
        let mut gs = Mat::zeros((r, s));
        for i in 0..r {
            let mut optical = 0.0;
            let mut after = vec![0.0; s];
            for k in 0..s {
                optical += sigma[[i, k]] * self.delta[[i, k]];
                after[k] = (-optical).exp();
            }
            // suffix[k] = Σ_{j>k} g_j w_j
            let mut suffix = 0.0;
            for k in (0..s).rev() {
                gs[[i, k]] = self.delta[[i, k]] * (grad[[i, k]] * after[k] - suffix);
                suffix += grad[[i, k]] * output[[i, k]];
            }
        }
        vec![Some(gs)]
    }
}

/// `out[r] = Σ_s weights[r, s] · rows[r·S + s]`.
struct WeightedRaySum;

impl Function for WeightedRaySum {
    fn name(&self) -> &'static str {
        "weighted_ray_sum"
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let (w, rows) = (inputs[0], inputs[1]);
        let (r, s) = w.dim();
        let d = rows.ncols();
        let mut gw = Mat::zeros((r, s));
        let mut grows = Mat::zeros((r * s, d));
        for i in 0..r {
            let g = grad.row(i);
            for k in 0..s {
                let row = rows.row(i * s + k);
                gw[[i, k]] = g.dot(&row);
                let wk = w[[i, k]];
                grows.row_mut(i * s + k).zip_mut_with(&g, |x, &gv| *x = wk * gv);
            }
        }
        vec![Some(gw), Some(grows)]
    }
}

pub fn composite_weights_op(ctx: &mut Ctx, sigma_rs: Var, delta: Mat) -> Var {
    let sigma = ctx.tape.value(sigma_rs);
    let (r, s) = sigma.dim();
    let mut out = Mat::zeros((r, s));
    for i in 0..r {
        let (w, _) = alpha_weights(
            sigma.row(i).as_slice().expect("contiguous"),
            delta.row(i).as_slice().expect("contiguous"),
        );
        for k in 0..s {
            out[[i, k]] = w[k];
        }
    }
    ctx.tape
        .custom(&[sigma_rs], out, Box::new(CompositeWeights { delta }))
}

pub fn weighted_ray_sum(ctx: &mut Ctx, weights: Var, rows: Var) -> Var {
    let (w, x) = (ctx.tape.value(weights), ctx.tape.value(rows));
    let (r, s) = w.dim();
    let d = x.ncols();
    let mut out = Mat::zeros((r, d));
    for i in 0..r {
        let mut acc = out.row_mut(i);
        for k in 0..s {
            let wk = w[[i, k]];
            if wk != 0.0 {
                acc.scaled_add(wk, &x.row(i * s + k));
            }
        }
    }
    ctx.tape.custom(&[weights, rows], out, Box::new(WeightedRaySum))
}

/// Field samples along a ray bundle, composited.
pub struct RayRender {
    pub rays: usize,
    pub samples_per_ray: usize,
    pub foreground_per_ray: usize,
    /// `R×S` compositing weights.
    pub weights: Var,
    /// `(R·S)×D` per-sample features, ray-major and depth-sorted.
    pub features: Var,
    /// `R×D` aggregated features.
    pub aggregated: Var,
    /// Per-sample ray directions, aligned with `features`.
    pub sample_dirs: Vec<Vec3>,
    pub t: Vec<Vec<f64>>,
    /// Expected foreground depth, normalized by foreground opacity.
    pub depth: Vec<f64>,
    pub foreground_alpha: Vec<f64>,
    pub accumulated_alpha: Vec<f64>,
    pub fallback_rays: usize,
}

impl RayRender {
    pub fn weight_values(&self, ctx: &Ctx) -> Mat {
        ctx.tape.value(self.weights).clone()
    }
}

/// Renders `rays` through the field: coarse pass, importance pass,
/// background pass, then compositing of density-trunk features.
pub fn render_rays<R: Rng + ?Sized>(
    ctx: &mut Ctx,
    field: &FieldNet,
    styles: &[Var],
    rays: &RayBundle,
    cfg: &SamplingConfig,
    rng: &mut R,
    counter: &EvalCounter,
) -> Result<RayRender> {
    cfg.validate()?;
    let nr = rays.len();
    let (n, m, g) = (cfg.n_coarse, cfg.n_importance, cfg.n_background);
    let nf = n + m;
    let s = nf + g;

    // Coarse pass.
    let mut coarse_t = Vec::with_capacity(nr);
    let mut coarse_pts = Vec::with_capacity(nr * n);
    let mut coarse_dirs = Vec::with_capacity(nr * n);
    for i in 0..nr {
        let t = stratified_samples(rays.near[i], rays.far[i], n, rng, cfg.stratified)?;
        for &tv in &t {
            coarse_pts.push(inside(point_on_ray(rays.origins[i], rays.directions[i], tv)));
            coarse_dirs.push(rays.directions[i]);
        }
        coarse_t.push(t);
    }
    let coarse = field.eval_foreground(ctx, &coarse_pts, &coarse_dirs, styles, false)?;
    counter.add_foreground(coarse_pts.len());

    // Importance pass driven by the coarse weights.
    let mut fine_t = Vec::with_capacity(nr);
    let mut fallback_rays = 0;
    let fine = if m > 0 {
        let sig = ctx.tape.value(coarse.sigma).clone();
        let mut pts = Vec::with_capacity(nr * m);
        let mut dirs = Vec::with_capacity(nr * m);
        for i in 0..nr {
            let sv: Vec<f64> = (0..n).map(|k| sig[[i * n + k, 0]]).collect();
            let dv = ray_deltas(&coarse_t[i], rays.far[i], rays.hits[i]);
            let (w, _) = alpha_weights(&sv, &dv);
            let edges = bin_edges(&coarse_t[i], rays.near[i], rays.far[i]);
            let draw = if cfg.stratified {
                importance_samples(&edges, &w, m, Some(&mut *rng))
            } else {
                importance_samples::<R>(&edges, &w, m, None)
            };
            fallback_rays += draw.fallback as usize;
            for &tv in &draw.t {
                pts.push(inside(point_on_ray(rays.origins[i], rays.directions[i], tv)));
                dirs.push(rays.directions[i]);
            }
            fine_t.push(draw.t);
        }
        counter.add_foreground(pts.len());
        Some(field.eval_foreground(ctx, &pts, &dirs, styles, false)?)
    } else {
        None
    };

    // Background pass.
    let mut bg_t = Vec::with_capacity(nr);
    let bg = if g > 0 {
        let mut pts = Vec::with_capacity(nr * g);
        let mut dirs = Vec::with_capacity(nr * g);
        for i in 0..nr {
            let t = background_samples(
                rays.origins[i],
                rays.directions[i],
                g,
                field.cfg.background_start,
                rng,
                cfg.stratified,
            );
            for &tv in &t {
                pts.push(point_on_ray(rays.origins[i], rays.directions[i], tv));
                dirs.push(rays.directions[i]);
            }
            bg_t.push(t);
        }
        counter.add_background(pts.len());
        Some(field.eval_background(ctx, &pts, &dirs, styles, false)?)
    } else {
        None
    };

    // Merge into ray-major, depth-sorted order: [fg sorted | bg].
    let coarse_rows = nr * n;
    let fine_rows = nr * m;
    let mut order = Vec::with_capacity(nr * s);
    let mut t_all = Vec::with_capacity(nr);
    let mut delta = Mat::zeros((nr, s));
    let mut sample_dirs = Vec::with_capacity(nr * s);
    for i in 0..nr {
        let mut fg: Vec<(f64, usize)> = (0..n).map(|k| (coarse_t[i][k], i * n + k)).collect();
        if m > 0 {
            fg.extend((0..m).map(|k| (fine_t[i][k], coarse_rows + i * m + k)));
        }
        fg.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ft: Vec<f64> = fg.iter().map(|p| p.0).collect();
        let fd = ray_deltas(&ft, rays.far[i], rays.hits[i]);
        for (k, d) in fd.iter().enumerate() {
            delta[[i, k]] = *d;
        }
        order.extend(fg.iter().map(|p| p.1));
        let mut tv = ft;
        if g > 0 {
            let bt = &bg_t[i];
            for k in 0..g {
                delta[[i, nf + k]] = if k + 1 < g {
                    bt[k + 1] - bt[k]
                } else {
                    BACKGROUND_LAST_DELTA
                };
                order.push(coarse_rows + fine_rows + i * g + k);
            }
            tv.extend_from_slice(bt);
        }
        sample_dirs.extend(std::iter::repeat_n(rays.directions[i], s));
        t_all.push(tv);
    }
    let mut sig_parts = vec![coarse.sigma];
    let mut feat_parts = vec![coarse.features];
    if let Some(f) = &fine {
        sig_parts.push(f.sigma);
        feat_parts.push(f.features);
    }
    if let Some(b) = &bg {
        sig_parts.push(b.sigma);
        feat_parts.push(b.features);
    }
    let sigma_all = concat_rows_if_needed(ctx, &sig_parts);
    let feat_all = concat_rows_if_needed(ctx, &feat_parts);
    let sigma_sorted = ctx.tape.gather_rows(sigma_all, &order);
    let features = ctx.tape.gather_rows(feat_all, &order);
    let sigma_rs = ctx.tape.reshape(sigma_sorted, nr, s);
    let weights = composite_weights_op(ctx, sigma_rs, delta);
    let aggregated = weighted_ray_sum(ctx, weights, features);

    let wv = ctx.tape.value(weights);
    let mut depth = Vec::with_capacity(nr);
    let mut foreground_alpha = Vec::with_capacity(nr);
    let mut accumulated_alpha = Vec::with_capacity(nr);
    for i in 0..nr {
        let fa: f64 = (0..nf).map(|k| wv[[i, k]]).sum();
        let acc: f64 = (0..s).map(|k| wv[[i, k]]).sum();
        let d = if fa > 1e-12 {
            (0..nf).map(|k| wv[[i, k]] * t_all[i][k]).sum::<f64>() / fa
        } else {
            rays.far[i]
        };
        depth.push(d.clamp(rays.near[i], rays.far[i]));
        foreground_alpha.push(fa);
        accumulated_alpha.push(acc);
    }
    Ok(RayRender {
        rays: nr,
        samples_per_ray: s,
        foreground_per_ray: nf,
        weights,
        features,
        aggregated,
        sample_dirs,
        t: t_all,
        depth,
        foreground_alpha,
        accumulated_alpha,
        fallback_rays,
    })
}

fn concat_rows_if_needed(ctx: &mut Ctx, parts: &[Var]) -> Var {
    if parts.len() == 1 {
        parts[0]
    } else {
        ctx.tape.concat_rows(parts)
    }
}

/// Intervals for foreground samples; rays that miss the sphere contribute
/// nothing.
fn ray_deltas(t: &[f64], far: f64, hit: bool) -> Vec<f64> {
    if hit {
        deltas(t, far)
    } else {
        vec![0.0; t.len()]
    }
}

fn inside(p: Vec3) -> Vec3 {
    let r = crate::camera::norm(p);
    if r > 1.0 {
        crate::camera::scale(p, 1.0 / r)
    } else {
        p
    }
}

/// Per-point color path composited with the render's weights (`R×3`).
pub fn render_nerf_rgb(
    ctx: &mut Ctx,
    field: &FieldNet,
    styles: &[Var],
    render: &RayRender,
) -> Result<Var> {
    let x = field.color_trunk_forward(ctx, render.features, styles, &[]);
    let color = field.color_head_forward(ctx, x, &render.sample_dirs)?;
    Ok(weighted_ray_sum(ctx, render.weights, color))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(stratified_samples(0.0, 1.0, 2, &mut rng, false).unwrap(), vec![0.25, 0.75]);
        assert!(stratified_samples(1.0, 1.0, 2, &mut rng, false).is_err());
    }

    #[test]
    fn stratified_samples_stay_in_their_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = stratified_samples(0.0, 1.0, 4, &mut rng, true).unwrap();
            for (i, v) in t.iter().enumerate() {
                assert!(*v >= i as f64 * 0.25 && *v < (i + 1) as f64 * 0.25);
            }
        }
    }

    #[test]
    fn one_hot_weights_confine_importance_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let edges = [0.0, 0.25, 0.5, 0.75, 1.0];
        let w = [0.0, 0.0, 1.0, 0.0];
        let d = importance_samples(&edges, &w, 64, Some(&mut rng));
        assert!(!d.fallback);
        assert!(d.t.iter().all(|t| (0.5..0.75).contains(t)));
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let edges = [0.0, 0.5, 1.0];
        let d = importance_samples::<ChaCha8Rng>(&edges, &[0.0, 0.0], 4, None);
        assert!(d.fallback);
        assert_eq!(d.t, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn vacuum_composites_to_nothing() {
        let t = [0.1, 0.2, 0.5];
        let vals = vec![vec![1.0, 2.0]; 3];
        let out = composite(&[0.0; 3], &t, 1.0, &vals).unwrap();
        assert!(out.weights.iter().all(|w| *w == 0.0));
        assert_eq!(out.aggregated, vec![0.0, 0.0]);
        assert_eq!(out.accumulated_alpha, 0.0);
        assert!(out.transmittance.iter().all(|t| *t == 1.0));
    }

    #[test]
    fn opaque_sample_absorbs_everything_behind_it() {
        let t = [0.0, 0.1, 0.2, 0.3];
        let sigma = [200.0, 5.0, 5.0, 5.0];
        let out = composite(&sigma, &t, 0.4, &vec![vec![1.0]; 4]).unwrap();
        assert!(out.weights[0] > 0.999);
        assert!(out.weights[1..].iter().all(|w| *w < 1e-8));
    }

    #[test]
    fn unsorted_depths_are_rejected() {
        let r = composite(&[1.0, 1.0], &[0.5, 0.2], 1.0, &[vec![0.0], vec![0.0]]);
        assert!(r.is_err());
    }

    #[test]
    fn budget_counts_match_the_formula() {
        let cfg = SamplingConfig::default();
        let b = count_evaluations(256, 32, &cfg);
        assert_eq!(b.approx_total, 81_920);
        assert_eq!(b.full_total, 5_242_880);
        assert_eq!((b.ratio_num, b.ratio_den), (64, 1));
        let b = count_evaluations(32, 32, &cfg);
        assert_eq!((b.ratio_num, b.ratio_den), (1, 1));
        let b = count_evaluations(1024, 32, &cfg);
        assert_eq!((b.ratio_num, b.ratio_den), (1024, 1));
    }

    #[test]
    fn background_depths_increase_and_reach_the_start_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let o = [0.0, 0.0, 1.0];
        let d = [0.0, 0.0, -1.0];
        let t = background_samples(o, d, 8, 2.0, &mut rng, false);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        for tv in &t {
            let r = crate::camera::norm(point_on_ray(o, d, *tv));
            assert!(r >= 2.0);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_are_a_subprobability(
                sigma in proptest::collection::vec(0.0f64..50.0, 1..20),
                gaps in proptest::collection::vec(0.001f64..0.5, 20),
            ) {
                let mut t = Vec::new();
                let mut acc = 0.0;
                for g in gaps.iter().take(sigma.len()) {
                    acc += g;
                    t.push(acc);
                }
                let vals = vec![vec![1.0]; sigma.len()];
                let out = composite(&sigma, &t, acc + 0.1, &vals).unwrap();
                prop_assert!(out.weights.iter().all(|w| *w >= 0.0));
                prop_assert!(out.accumulated_alpha <= 1.0 + 1e-6);
            }

            #[test]
            fn inserting_vacuum_samples_changes_nothing(
                sigma in proptest::collection::vec(0.0f64..10.0, 2..10),
                at in 0usize..10,
                frac in 0.05f64..0.95,
            ) {
                // Zero the interval that receives the new sample so the
                // refined piecewise-constant density is unchanged.
                let mut sigma = sigma;
                let n = sigma.len();
                let at = at % n;
                sigma[at] = 0.0;
                let t: Vec<f64> = (0..n).map(|i| 0.1 * (i as f64 + 1.0)).collect();
                let end = 0.1 * (n as f64 + 1.0);
                let vals: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 1.0]).collect();
                let base = composite(&sigma, &t, end, &vals).unwrap();
                let next = if at + 1 < n { t[at + 1] } else { end };
                let tn = t[at] + frac * (next - t[at]);
                let mut t2 = t.clone();
                let mut s2 = sigma.clone();
                let mut v2 = vals.clone();
                t2.insert(at + 1, tn);
                s2.insert(at + 1, 0.0);
                v2.insert(at + 1, vec![99.0, 99.0]);
                let refined = composite(&s2, &t2, end, &v2).unwrap();
                for (a, b) in base.aggregated.iter().zip(&refined.aggregated) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
                prop_assert!((base.accumulated_alpha - refined.accumulated_alpha).abs() < 1e-6);
            }
        }
    }
}
