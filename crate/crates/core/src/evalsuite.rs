//! Analysis instruments: multi-view consistency, geometry extraction, the
//! camera predictor, inversion and rendering benchmarks.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::Conv3;
use crate::camera::{normalize, sample_pose, CameraConfig, CameraPose};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::mcubes::{marching_cubes, Grid, Mesh};
use crate::params::{Adam, AdamConfig, Ctx, Group, ParamStore};
use crate::renderer::{count_evaluations, EvalCounter, EvaluationBudget};
use crate::styles::{broadcast, Dense, StyleStack, StyleVector, LRELU_SLOPE};
use crate::tape::{Function, Mat, Var};

/// Largest marching-cubes grid accepted by [`extract_geometry`].
pub const GEOMETRY_CAP: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub deltas_deg: Vec<f64>,
    /// Mean absolute pixel change for a `+δ` yaw step.
    pub change_pos: Vec<f64>,
    /// Same for `−δ`.
    pub change_neg: Vec<f64>,
    /// Average of the two directions.
    pub change: Vec<f64>,
    /// Ring depth minus center depth at the center pose; positive when the
    /// middle of the object is nearer than its silhouette.
    pub convexity: Option<f64>,
    pub evaluations: u64,
    pub millis_per_frame: f64,
}

fn mean_abs_diff(a: &Mat, b: &Mat) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Renders `center` and yaw-perturbed views of one style.
pub fn consistency_sweep(
    gen: &Generator,
    store: &ParamStore,
    stack: &StyleStack,
    center: &CameraPose,
    deltas_deg: &[f64],
    resolution: usize,
) -> Result<ConsistencyReport> {
    let counter = EvalCounter::default();
    let started = Instant::now();
    let reference = gen.render_counted(store, stack, center, resolution, None, &counter)?;
    let mut frames = 1usize;
    let mut report = ConsistencyReport {
        deltas_deg: deltas_deg.to_vec(),
        change_pos: Vec::new(),
        change_neg: Vec::new(),
        change: Vec::new(),
        convexity: depth_convexity(&reference.depth, &reference.alpha, reference.base_resolution),
        evaluations: 0,
        millis_per_frame: 0.0,
    };
    for &d in deltas_deg {
        let mut pair = [0.0; 2];
        for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let mut pose = *center;
            pose.phi += sign * d.to_radians();
            let img = gen.render_counted(store, stack, &pose, resolution, None, &counter)?;
            frames += 1;
            pair[k] = mean_abs_diff(&img.rgb, &reference.rgb);
        }
        report.change_pos.push(pair[0]);
        report.change_neg.push(pair[1]);
        report.change.push(0.5 * (pair[0] + pair[1]));
    }
    report.evaluations = counter.foreground() + counter.background();
    report.millis_per_frame = started.elapsed().as_secs_f64() * 1e3 / frames as f64;
    Ok(report)
}

/// Mean depth on the silhouette ring minus mean depth near the centroid
/// of the opaque region (`alpha > 0.5`). `None` when the region is too
/// small to have both.
pub fn depth_convexity(depth: &[f64], alpha: &[f64], n: usize) -> Option<f64> {
    let inside = |x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && (x as usize) < n && (y as usize) < n && alpha[y as usize * n + x as usize] > 0.5
    };
    let mut count = 0.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for y in 0..n {
        for x in 0..n {
            if inside(x as isize, y as isize) {
                count += 1.0;
                cx += x as f64;
                cy += y as f64;
            }
        }
    }
    if count < 9.0 {
        return None;
    }
    cx /= count;
    cy /= count;
    let r = (count / std::f64::consts::PI).sqrt();
    let (mut ring, mut nr, mut core, mut nc) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..n as isize {
        for x in 0..n as isize {
            if !inside(x, y) {
                continue;
            }
            let d = depth[y as usize * n + x as usize];
            let edge = !(inside(x - 1, y) && inside(x + 1, y) && inside(x, y - 1) && inside(x, y + 1));
            let dist = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if edge {
                ring += d;
                nr += 1.0;
            } else if dist <= 0.35 * r {
                core += d;
                nc += 1.0;
            }
        }
    }
    if nr == 0.0 || nc == 0.0 {
        return None;
    }
    Some(ring / nr - core / nc)
}

#[derive(Clone, Debug)]
pub struct Geometry {
    pub mesh: Mesh,
    /// Set when no cell crosses the iso-level.
    pub empty: bool,
    pub iso: f64,
    pub cells: usize,
}

pub fn isosurface(grid: &Grid, iso: f64) -> Geometry {
    let mesh = marching_cubes(grid, iso);
    Geometry {
        empty: mesh.is_empty(),
        mesh,
        iso,
        cells: grid.n - 1,
    }
}

/// Foreground surface of one style at the generator's iso-level.
pub fn extract_geometry(gen: &Generator, store: &ParamStore, stack: &StyleStack, cells: usize) -> Result<Geometry> {
    if cells == 0 || cells > GEOMETRY_CAP {
        return Err(Error::Argument(format!("grid resolution must be in 1..={GEOMETRY_CAP}")));
    }
    let grid = gen.density_grid(store, stack, cells)?;
    Ok(isosurface(&grid, gen.iso_level()))
}

/// Largest distance of a mesh vertex from `radius` around the origin.
pub fn max_radial_deviation(mesh: &Mesh, radius: f64) -> f64 {
    mesh.vertices
        .iter()
        .map(|v| (crate::camera::norm(*v) - radius).abs())
        .fold(0.0, f64::max)
}

/// `0.5r²` for `|r| < 1`, `|r| − 0.5` beyond.
pub fn smooth_l1(r: f64) -> f64 {
    if r.abs() < 1.0 {
        0.5 * r * r
    } else {
        r.abs() - 0.5
    }
}

pub fn smooth_l1_grad(r: f64) -> f64 {
    r.clamp(-1.0, 1.0)
}

struct SmoothL1;

impl Function for SmoothL1 {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Option<Mat>> {
        let mut g = inputs[0].mapv(smooth_l1_grad);
        g *= grad;
        vec![Some(g)]
    }
}

fn smooth_l1_var(ctx: &mut Ctx, r: Var) -> Var {
    let v = ctx.tape.value(r).mapv(smooth_l1);
    ctx.tape.custom(&[r], v, Box::new(SmoothL1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub steps: usize,
    pub batch: usize,
    /// Rendered training pairs; batches are drawn from this pool.
    pub pool: usize,
    pub validation: usize,
    pub channels: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 8,
            pool: 256,
            validation: 64,
            channels: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Five conv blocks and a linear head mapping an image to `(pitch, yaw)`.
pub struct CameraPredictor {
    pub resolution: usize,
    pub convs: Vec<Conv3>,
    pub head: Dense,
    pub store: ParamStore,
    /// Output clamp, from the pose distribution.
    pub support: ((f64, f64), (f64, f64)),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub median_error_deg: f64,
    pub losses: Vec<f64>,
}

pub const PREDICTOR_BLOCKS: usize = 5;

impl CameraPredictor {
    pub fn build(resolution: usize, channels: usize, cam: &CameraConfig, seed: u64) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 1 << PREDICTOR_BLOCKS {
            return Err(Error::Argument(format!(
                "predictor input must be a power of two ≥ {}",
                1 << PREDICTOR_BLOCKS
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for b in 0..PREDICTOR_BLOCKS {
            convs.push(Conv3::build(&mut store, &format!("pred.conv{b}"), Group::Predictor, cin, channels, &mut rng));
            cin = channels;
        }
        let last = resolution >> PREDICTOR_BLOCKS;
        let head = Dense::build(&mut store, "pred.head", Group::Predictor, last * last * channels, 2, &mut rng);
        Ok(Self {
            resolution,
            convs,
            head,
            store,
            support: cam.distribution.support(),
        })
    }

    fn forward_with(&self, ctx: &mut Ctx, img: Var) -> Var {
        let mut x = img;
        let mut r = self.resolution;
        for conv in &self.convs {
            x = conv.forward(ctx, x, r, r);
            x = ctx.tape.leaky_relu(x, LRELU_SLOPE);
            x = ctx.tape.avg_pool2(x, r, r);
            r /= 2;
        }
        let c = ctx.tape.shape(x).1;
        let flat = ctx.tape.reshape(x, 1, r * r * c);
        self.head.forward(ctx, flat)
    }

    /// `(pitch, yaw)` clamped to the pose support.
    pub fn predict(&self, image: &Mat) -> Result<(f64, f64)> {
        if image.dim() != (self.resolution * self.resolution, 3) {
            return Err(Error::Argument("predictor input has the wrong shape".into()));
        }
        let mut ctx = Ctx::new(&self.store);
        let x = ctx.tape.leaf(image.clone());
        let y = self.forward_with(&mut ctx, x);
        let v = ctx.tape.value(y);
        let ((p0, p1), (y0, y1)) = self.support;
        Ok((v[[0, 0]].clamp(p0, p1), v[[0, 1]].clamp(y0, y1)))
    }

    pub fn predict_pose(&self, image: &Mat, cam: &CameraConfig) -> Result<CameraPose> {
        let (theta, phi) = self.predict(image)?;
        Ok(cam.pose(theta, phi))
    }
}

/// Angle between the viewing directions of two poses, in degrees.
pub fn angular_error_deg(a: &CameraPose, b: &CameraPose) -> f64 {
    let (pa, pb) = (normalize(a.position()), normalize(b.position()));
    crate::camera::dot(pa, pb).clamp(-1.0, 1.0).acos().to_degrees()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Self-generated `(image, pose)` pairs from a frozen generator.
pub fn render_pose_pairs(
    gen: &Generator,
    store: &ParamStore,
    resolution: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(Mat, CameraPose)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = gen.layer_count();
    (0..count)
        .map(|_| {
            let w = gen.style_for_seed(store, rng.random(), 1.0)?;
            let pose = sample_pose(&gen.cfg.camera, &mut rng);
            let img = gen.render(store, &broadcast(&w, layers)?, &pose, resolution, None)?;
            Ok((img.rgb, pose))
        })
        .collect()
}

/// Trains a predictor on renders of `gen`, aborting when the loss after a
/// fifth of the steps is above where it started.
pub fn train_camera_predictor(
    gen: &Generator,
    store: &ParamStore,
    cfg: &PredictorConfig,
) -> Result<(CameraPredictor, PredictorReport)> {
    let res = gen.cfg.target_resolution;
    let train = render_pose_pairs(gen, store, res, cfg.pool, cfg.seed)?;
    let val = render_pose_pairs(gen, store, res, cfg.validation, cfg.seed ^ 0x5eed)?;
    train_predictor_on(&train, &val, &gen.cfg.camera, cfg)
}

pub fn train_predictor_on(
    train: &[(Mat, CameraPose)],
    val: &[(Mat, CameraPose)],
    cam: &CameraConfig,
    cfg: &PredictorConfig,
) -> Result<(CameraPredictor, PredictorReport)> {
    if train.is_empty() {
        return Err(Error::Argument("predictor needs training pairs".into()));
    }
    let res = (train[0].0.nrows() as f64).sqrt() as usize;
    let mut pred = CameraPredictor::build(res, cfg.channels, cam, cfg.seed)?;
    let ids: Vec<_> = pred.store.ids().collect();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut adam = Adam::new(adam_cfg, &pred.store, ids.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(cfg.steps);
    let window = (cfg.steps / 20).max(1);
    for step in 0..cfg.steps {
        let mut grads: Vec<Mat> = ids.iter().map(|id| Mat::zeros(pred.store.get(*id).dim())).collect();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let (img, pose) = &train[rng.random_range(0..train.len())];
            let mut ctx = Ctx::new(&pred.store);
            let x = ctx.tape.leaf(img.clone());
            let y = pred.forward_with(&mut ctx, x);
            let t = ctx.tape.leaf(Mat::from_shape_vec((1, 2), vec![pose.theta, pose.phi]).expect("1×2"));
            let r = ctx.tape.sub(y, t);
            let l = smooth_l1_var(&mut ctx, r);
            let l = ctx.tape.sum(l);
            loss += ctx.tape.scalar(l) / cfg.batch as f64;
            for (acc, g) in grads.iter_mut().zip(ctx.param_grads(l, &ids)) {
                acc.scaled_add(1.0 / cfg.batch as f64, &g);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("predictor loss {loss} at step {step}")));
        }
        losses.push(loss);
        adam.step(&mut pred.store, &grads, |_| 1.0);
        if step + 1 == (cfg.steps / 5).max(window * 2) {
            let initial = losses[..window].iter().sum::<f64>() / window as f64;
            let recent = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
            if recent > initial {
                return Err(Error::Diverged(format!(
                    "predictor loss rose from {initial:.4} to {recent:.4} after {} steps",
                    step + 1
                )));
            }
        }
    }
    let errors = val
        .iter()
        .map(|(img, pose)| Ok(angular_error_deg(&pred.predict_pose(img, cam)?, pose)))
        .collect::<Result<Vec<_>>>()?;
    let report = PredictorReport {
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        median_error_deg: median(errors),
        losses,
    };
    Ok((pred, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvertConfig {
    pub iters: usize,
    pub lr: f64,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self { iters: 200, lr: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub pose: CameraPose,
    /// Best per-layer styles found.
    pub styles: StyleStack,
    pub mse: f64,
    /// Best error so far after each iteration, starting with the initial one.
    pub history: Vec<f64>,
}

/// Pixel MSE and its gradient with respect to the per-layer style rows.
pub fn reconstruction_grad(
    gen: &Generator,
    store: &ParamStore,
    rows: &Mat,
    pose: &CameraPose,
    target: &Mat,
    resolution: usize,
) -> Result<(f64, Mat)> {
    let plan = gen.plan_for_resolution(resolution)?;
    let mut ctx = Ctx::new(store);
    let w = ctx.tape.leaf(rows.clone());
    let styles: Vec<Var> = (0..rows.nrows()).map(|i| ctx.tape.slice_rows(w, i, 1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opts = crate::generator::SynthOptions {
        stratified: false,
        nerf_rgb: false,
        noise: None,
    };
    let out = gen.synthesize(&mut ctx, &styles, pose, &plan, &opts, &mut rng, &EvalCounter::default())?;
    let t = ctx.tape.leaf(target.clone());
    let d = ctx.tape.sub(out.image, t);
    let sq = ctx.tape.square(d);
    let loss = ctx.tape.mean(sq);
    let g = ctx.tape.grad(loss, &[w])[0].expect("styles feed the image");
    Ok((ctx.tape.scalar(loss), ctx.tape.value(g).clone()))
}

fn stack_to_mat(stack: &StyleStack) -> Mat {
    let (l, d) = (stack.layer_count(), stack.dim());
    Mat::from_shape_fn((l, d), |(i, j)| stack.rows[i].0[j])
}

fn mat_to_stack(m: &Mat) -> StyleStack {
    StyleStack {
        rows: m.rows().into_iter().map(|r| StyleVector(r.to_vec())).collect(),
    }
}

/// Optimizes per-layer styles from the mean style toward `target` at a
/// fixed pose, keeping the best iterate.
pub fn invert(
    gen: &Generator,
    store: &ParamStore,
    target: &Mat,
    pose: &CameraPose,
    cfg: &InvertConfig,
) -> Result<Inversion> {
    let res = (target.nrows() as f64).sqrt() as usize;
    if res * res != target.nrows() || target.ncols() != 3 {
        return Err(Error::Argument("target must be a square RGB image".into()));
    }
    let mean = StyleVector(store.get(gen.w_avg).iter().copied().collect());
    let mut rows = stack_to_mat(&broadcast(&mean, gen.layer_count())?);
    let (mut m, mut v) = (Mat::zeros(rows.dim()), Mat::zeros(rows.dim()));
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut best = (f64::INFINITY, rows.clone());
    let mut history = Vec::with_capacity(cfg.iters + 1);
    for it in 0..=cfg.iters {
        let (mse, g) = reconstruction_grad(gen, store, &rows, pose, target, res)?;
        if mse < best.0 {
            best = (mse, rows.clone());
        }
        history.push(best.0);
        if it == cfg.iters || !mse.is_finite() {
            break;
        }
        m = &m * b1 + &g * (1.0 - b1);
        v = &v * b2 + &(&g * &g) * (1.0 - b2);
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        ndarray::Zip::from(&mut rows)
            .and(&m)
            .and(&v)
            .for_each(|x, &mi, &vi| *x -= cfg.lr * (mi / c1) / ((vi / c2).sqrt() + eps));
    }
    Ok(Inversion {
        pose: *pose,
        styles: mat_to_stack(&best.1),
        mse: best.0,
        history,
    })
}

/// Pixel MSE of the mean-style render, the no-optimization baseline.
pub fn image_mse(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub resolution: usize,
    pub budget: EvaluationBudget,
    /// Field evaluations counted while rendering, when the model supports
    /// this resolution.
    pub counted: Option<u64>,
    pub millis: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Base grid used for the budget ratios.
    pub reference_base: usize,
    pub rows: Vec<BenchRow>,
}

/// Budgets relative to the smallest requested resolution, with timed
/// renders for resolutions the model produces.
pub fn bench(gen: &Generator, store: &ParamStore, stack: &StyleStack, resolutions: &[usize], repeats: usize) -> Result<BenchReport> {
    let reference_base = *resolutions
        .iter()
        .min()
        .ok_or_else(|| Error::Argument("no resolutions to benchmark".into()))?;
    let supported = gen.cfg.resolutions();
    let pose = gen.cfg.camera.mean_pose();
    let mut rows = Vec::new();
    for &res in resolutions {
        let budget = count_evaluations(res, reference_base, &gen.cfg.sampling);
        let (counted, millis) = if supported.contains(&res) {
            let counter = EvalCounter::default();
            let started = Instant::now();
            for _ in 0..repeats.max(1) {
                gen.render_counted(store, stack, &pose, res, None, &counter)?;
            }
            let per = started.elapsed().as_secs_f64() * 1e3 / repeats.max(1) as f64;
            let total = (counter.foreground() + counter.background()) / repeats.max(1) as u64;
            (Some(total), Some(per))
        } else {
            (None, None)
        };
        rows.push(BenchRow {
            resolution: res,
            budget,
            counted,
            millis,
        });
    }
    Ok(BenchReport { reference_base, rows })
}
