#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylefield::adversary::{DiscriminatorConfig, LossConfig};
use stylefield::camera::CameraConfig;
use stylefield::config::{DatasetConfig, TrainConfig};
use stylefield::field::FieldConfig;
use stylefield::generator::{Generator, GeneratorConfig};
use stylefield::params::ParamStore;
use stylefield::renderer::SamplingConfig;
use stylefield::schedule::ProgressiveSchedule;
use stylefield::styles::StylesConfig;
use stylefield::tape::Mat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 8² output from a 4² base, four samples per ray.
pub fn micro_config() -> TrainConfig {
    let generator = GeneratorConfig {
        styles: StylesConfig {
            z_dim: 6,
            w_dim: 6,
            mapping_layers: 2,
            ..Default::default()
        },
        field: FieldConfig {
            fourier_l: 2,
            n_sigma: 2,
            n_c: 3,
            hidden_fg: 6,
            hidden_bg: 5,
            bg_blocks: 1,
            color_hidden: 5,
            ..Default::default()
        },
        sampling: SamplingConfig {
            n_coarse: 2,
            n_importance: 0,
            n_background: 2,
            stratified: true,
        },
        camera: CameraConfig {
            fov: 40.0,
            bounding_radius: 0.6,
            ..Default::default()
        },
        base_resolution: 4,
        target_resolution: 8,
        channel_base: 32,
        channel_max: 6,
        ..Default::default()
    };
    TrainConfig {
        generator,
        discriminator: DiscriminatorConfig {
            channel_base: 32,
            channel_max: 5,
            ..Default::default()
        },
        loss: LossConfig {
            nerf_pixels: 6,
            r1_interval: 1,
            ..Default::default()
        },
        schedule: ProgressiveSchedule {
            t1: 16,
            t2: 48,
            t3: 96,
            ..Default::default()
        },
        dataset: DatasetConfig {
            resolution: 8,
            count: 12,
            ..Default::default()
        },
        batch: 2,
        seed: 3,
        ..Default::default()
    }
    .resolved()
    .unwrap()
}

/// Small generator with importance sampling, 16² from 8².
pub fn small_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        styles: StylesConfig {
            z_dim: 8,
            w_dim: 8,
            mapping_layers: 3,
            ..Default::default()
        },
        field: FieldConfig {
            fourier_l: 3,
            n_sigma: 2,
            n_c: 4,
            hidden_fg: 12,
            hidden_bg: 8,
            bg_blocks: 2,
            color_hidden: 8,
            ..Default::default()
        },
        sampling: SamplingConfig {
            n_coarse: 6,
            n_importance: 6,
            n_background: 3,
            stratified: true,
        },
        camera: CameraConfig {
            fov: 40.0,
            bounding_radius: 0.6,
            ..Default::default()
        },
        base_resolution: 8,
        target_resolution: 32,
        channel_base: 128,
        channel_max: 10,
        ..Default::default()
    }
}

pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> (ParamStore, Generator) {
    let mut store = ParamStore::new();
    let gen = Generator::build(&mut store, cfg, &mut rng(seed)).unwrap();
    (store, gen)
}

pub fn lrelu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.2 * x
    }
}

/// `y = x·(W/√in)ᵀ + b` with nested loops.
pub fn dense_loop(w: &Mat, b: &Mat, x: &[f64]) -> Vec<f64> {
    let (out, inp) = w.dim();
    let g = 1.0 / (inp as f64).sqrt();
    (0..out)
        .map(|o| {
            let mut acc = 0.0;
            for i in 0..inp {
                acc += w[[o, i]] * g * x[i];
            }
            acc + b[[0, o]]
        })
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Index of `(x, y)` in a pixel-major `n×n` grid.
pub fn px(n: usize, x: usize, y: usize) -> usize {
    y * n + x
}

/// Replicate-padded 1D blur of length-`n` signal with the given taps,
/// one tap before and the rest after.
pub fn blur1d(v: &[f64], taps: &[f64]) -> Vec<f64> {
    let n = v.len() as isize;
    (0..n)
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(k, t)| {
                    let j = (i + k as isize - 1).clamp(0, n - 1);
                    t * v[j as usize]
                })
                .sum()
        })
        .collect()
}

/// Nearest 2× upsampling followed by a separable blur, on `n×n×c`.
pub fn nearest_blur_oracle(x: &Mat, n: usize, taps: &[f64]) -> Mat {
    let c = x.ncols();
    let m = 2 * n;
    let mut up = Mat::zeros((m * m, c));
    for y in 0..m {
        for xx in 0..m {
            for ch in 0..c {
                up[[px(m, xx, y), ch]] = x[[px(n, xx / 2, y / 2), ch]];
            }
        }
    }
    let mut rows = Mat::zeros((m * m, c));
    for y in 0..m {
        for ch in 0..c {
            let line: Vec<f64> = (0..m).map(|xx| up[[px(m, xx, y), ch]]).collect();
            for (xx, v) in blur1d(&line, taps).into_iter().enumerate() {
                rows[[px(m, xx, y), ch]] = v;
            }
        }
    }
    let mut out = Mat::zeros((m * m, c));
    for xx in 0..m {
        for ch in 0..c {
            let line: Vec<f64> = (0..m).map(|y| rows[[px(m, xx, y), ch]]).collect();
            for (y, v) in blur1d(&line, taps).into_iter().enumerate() {
                out[[px(m, xx, y), ch]] = v;
            }
        }
    }
    out
}

/// Relative error in the usual symmetric form with an absolute floor.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(floor)
}

pub type Field3 = fn([f64; 3]) -> f64;

/// Midpoint-rule compositing with `k` uniform segments: `(alpha, color)`.
pub fn quadrature_oracle(density: Field3, value: Field3, o: [f64; 3], d: [f64; 3], near: f64, far: f64, k: usize) -> (f64, f64) {
    let h = (far - near) / k as f64;
    let (mut trans, mut color) = (1.0f64, 0.0);
    for i in 0..k {
        let t = near + (i as f64 + 0.5) * h;
        let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
        let a = 1.0 - (-density(p) * h).exp();
        color += trans * a * value(p);
        trans *= 1.0 - a;
    }
    (1.0 - trans, color)
}

pub fn radius(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub fn homogeneous(_: [f64; 3]) -> f64 {
    1.2
}

pub fn gaussian_bump(p: [f64; 3]) -> f64 {
    6.0 * (-radius(p).powi(2) / (2.0 * 0.25 * 0.25)).exp()
}

pub fn opaque_shell(p: [f64; 3]) -> f64 {
    let r = radius(p);
    if (0.35..=0.5).contains(&r) {
        40.0
    } else {
        0.0
    }
}

pub fn smooth_value(p: [f64; 3]) -> f64 {
    0.6 + 0.3 * (4.0 * p[2]).sin() + 0.1 * p[0]
}

/// The three analytic media along the z axis through the unit sphere.
pub fn analytic_media() -> [(&'static str, Field3); 3] {
    [
        ("homogeneous", homogeneous as Field3),
        ("gaussian bump", gaussian_bump as Field3),
        ("opaque shell", opaque_shell as Field3),
    ]
}

/// Outcome of a finite-difference check over sampled scalar parameters.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

fn fd_check(
    store: &ParamStore,
    ids: &[stylefield::params::ParamId],
    analytic: &[Mat],
    samples: usize,
    seed: u64,
    f: &dyn Fn(&ParamStore) -> f64,
) -> GradCheck {
    use rand::Rng;
    let sizes: Vec<usize> = analytic.iter().map(|g| g.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng(seed);
    let mut out = GradCheck {
        checked: 0,
        passed: 0,
        worst: 0.0,
    };
    let h = 1e-6;
    for _ in 0..samples {
        let mut k = r.random_range(0..total);
        let mut p = 0;
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        let cols = analytic[p].ncols();
        let (i, j) = (k / cols, k % cols);
        let mut plus = store.clone();
        plus.get_mut(ids[p])[[i, j]] += h;
        let mut minus = store.clone();
        minus.get_mut(ids[p])[[i, j]] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let e = rel_err(analytic[p][[i, j]], fd, 1e-7);
        out.checked += 1;
        if e < 1e-3 {
            out.passed += 1;
        }
        out.worst = out.worst.max(e);
    }
    out
}

/// Checks the combined generator objective (adversarial plus NeRF-path) and
/// the discriminator objective with R1, both on the micro configuration
/// while a stage is fading in.
pub fn gradcheck_micro(samples: usize, seed: u64) -> (GradCheck, GradCheck) {
    use stylefield::params::Ctx;
    use stylefield::renderer::EvalCounter;
    use stylefield::schedule::schedule_resolve;
    use stylefield::trainer::{derived_rng, discriminator_objective, generator_objective, GenSample, TrainState};

    let state = TrainState::new(micro_config()).unwrap();
    let cfg = &state.cfg;
    let model = &state.model;
    let st = schedule_resolve((cfg.schedule.t1 + cfg.schedule.t2) / 2, &cfg.schedule);
    assert!(st.alpha < 1.0 && st.alpha > 0.0);
    let mut sr = derived_rng(seed, 99, 0);
    let mut sample = GenSample::draw(&model.generator, cfg, &mut sr);
    sample.mix = Some((rng_normal(cfg.generator.styles.z_dim, seed + 1), 4));

    let g_obj = |s: &ParamStore| -> f64 {
        let mut ctx = Ctx::new(s);
        let o = generator_objective(&mut ctx, model, cfg, &sample, &st, &EvalCounter::default()).unwrap();
        assert!(o.nerf_path.is_some());
        ctx.tape.scalar(o.loss)
    };
    let g_ids = state.adam_g.ids.clone();
    let mut ctx = Ctx::new(&state.params);
    let o = generator_objective(&mut ctx, model, cfg, &sample, &st, &EvalCounter::default()).unwrap();
    let fake = ctx.tape.value(o.image).clone();
    let g_grads = ctx.param_grads(o.loss, &g_ids);
    let g = fd_check(&state.params, &g_ids, &g_grads, samples, seed + 2, &g_obj);

    let res = st.resolution;
    let real = {
        use rand::Rng;
        let mut r = rng(seed + 3);
        Mat::from_shape_simple_fn((res * res, 3), || r.random_range(-1.0..1.0))
    };
    let d_obj = |s: &ParamStore| -> f64 {
        let mut ctx = Ctx::new(s);
        let o = discriminator_objective(&mut ctx, model, cfg, &fake, &real, res, st.alpha, 1.0).unwrap();
        assert!(o.r1.is_some());
        ctx.tape.scalar(o.loss)
    };
    let d_ids = state.adam_d.ids.clone();
    let mut ctx = Ctx::new(&state.params);
    let o = discriminator_objective(&mut ctx, model, cfg, &fake, &real, res, st.alpha, 1.0).unwrap();
    let d_grads = ctx.param_grads(o.loss, &d_ids);
    let d = fd_check(&state.params, &d_ids, &d_grads, samples, seed + 4, &d_obj);
    (g, d)
}

pub fn rng_normal(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng(seed);
    (0..n).map(|_| r.sample(rand_distr::StandardNormal)).collect()
}
