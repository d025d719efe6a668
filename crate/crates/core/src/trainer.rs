//! Adversarial training: data ingestion, the per-step objectives, the
//! optimizer/averaging state and checkpoint archives.
//!
//! All randomness in a step is derived from `(seed, images_seen)`, so a run
//! resumed from a checkpoint replays exactly.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{d_loss_var, g_loss_var, nerf_path_loss, r1_penalty, Discriminator};
use crate::camera::{aligned_index_map, generate_rays, normalize, sample_pose, sphere_interval, CameraConfig, CameraPose};
use crate::config::{DataSource, DatasetConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, SynthOptions};
use crate::imageio::load_square;
use crate::params::{ema_update, Adam, Ctx, Group, ParamId, ParamStore};
use crate::renderer::EvalCounter;
use crate::schedule::{schedule_resolve, ScheduleState, Stage};
use crate::styles::LatentZ;
use crate::tape::{Mat, Var};
use crate::upsampler::{box_down, nearest_blur};

/// Stream derived from a seed, a purpose tag and an index.
pub fn derived_rng(seed: u64, tag: u64, n: u64) -> ChaCha8Rng {
    let mut x = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ n.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

const TAG_D_FAKE: u64 = 1;
const TAG_D_REAL: u64 = 2;
const TAG_G: u64 = 3;
const TAG_DATA: u64 = 4;

pub struct Dataset {
    pub images: Vec<Mat>,
    pub resolution: usize,
    /// Rendering pose, for synthetic images.
    pub poses: Vec<Option<CameraPose>>,
    /// Files that could not be read.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Image `i` box-downsampled to `res`.
    pub fn at_resolution(&self, i: usize, res: usize) -> Result<Mat> {
        downsample_to(&self.images[i], self.resolution, res)
    }
}

pub fn downsample_to(img: &Mat, from: usize, to: usize) -> Result<Mat> {
    if to > from || from % to != 0 || !(from / to).is_power_of_two() {
        return Err(Error::Argument(format!("cannot downsample {from} to {to}")));
    }
    let mut m = img.clone();
    let mut r = from;
    while r > to {
        m = box_down(r).apply(&m);
        r /= 2;
    }
    Ok(m)
}

/// Real image as seen during a fade: blend of the image and its
/// down-then-up version.
pub fn fade_real(img: &Mat, res: usize, alpha: f64, blur: &[f64]) -> Mat {
    if alpha >= 1.0 {
        return img.clone();
    }
    let low = box_down(res).apply(img);
    let up = nearest_blur(res / 2, blur).apply(&low);
    &up * (1.0 - alpha) + img * alpha
}

/// One Lambertian textured sphere at the origin, seen from `pose`.
pub fn render_sphere(pose: &CameraPose, res: usize, cam: &CameraConfig, radius: f64, albedo: [f64; 3]) -> Result<Mat> {
    let ss = 2;
    let rays = generate_rays(pose, res * ss, cam)?;
    let light = normalize([0.4, 0.8, 0.6]);
    let background = [0.0, 0.0, 0.0];
    let mut fine = Mat::zeros((res * res * ss * ss, 3));
    for i in 0..rays.len() {
        let (o, d) = (rays.origins[i], rays.directions[i]);
        let px = match sphere_interval(o, d, radius) {
            Some((t0, _)) if t0 > 0.0 => {
                let p = crate::camera::point_on_ray(o, d, t0);
                let n = normalize(p);
                let lambert = crate::camera::dot(n, light).max(0.0);
                let lon = n[0].atan2(n[2]);
                let pattern = 0.8 + 0.2 * (5.0 * lon).sin() * (6.0 * n[1]).cos();
                let shade = (0.3 + 0.7 * lambert) * pattern;
                [
                    2.0 * albedo[0] * shade - 1.0,
                    2.0 * albedo[1] * shade - 1.0,
                    2.0 * albedo[2] * shade - 1.0,
                ]
            }
            _ => background,
        };
        for c in 0..3 {
            fine[[i, c]] = px[c];
        }
    }
    Ok(box_down(res * ss).apply(&fine))
}

pub fn ingest(cfg: &DatasetConfig, cam: &CameraConfig) -> Result<Dataset> {
    let res = cfg.resolution;
    match cfg.source {
        DataSource::SyntheticSpheres => {
            let mut images = Vec::with_capacity(cfg.count);
            let mut poses = Vec::with_capacity(cfg.count);
            for i in 0..cfg.count {
                let mut rng = derived_rng(cfg.seed, TAG_DATA, i as u64);
                let pose = sample_pose(cam, &mut rng);
                let (lo, hi) = cfg.sphere_radius;
                let radius = lo + (hi - lo) * rng.random::<f64>();
                let albedo = [
                    rng.random_range(0.3..0.9),
                    rng.random_range(0.3..0.9),
                    rng.random_range(0.3..0.9),
                ];
                images.push(render_sphere(&pose, res, cam, radius, albedo)?);
                poses.push(Some(pose));
            }
            if images.is_empty() {
                return Err(Error::Data("synthetic dataset with zero images".into()));
            }
            Ok(Dataset {
                images,
                resolution: res,
                poses,
                skipped: 0,
            })
        }
        DataSource::ImageFolder => {
            let dir = cfg
                .path
                .as_ref()
                .ok_or_else(|| Error::Data("image_folder source needs a path".into()))?;
            let mut entries: Vec<_> = std::fs::read_dir(dir)
                .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            let mut images = Vec::new();
            let mut skipped = 0;
            for p in &entries {
                match load_square(p, res, cfg.center_crop) {
                    Ok(m) => images.push(m),
                    Err(e) => {
                        log::warn!("skipping {}: {e}", p.display());
                        skipped += 1;
                    }
                }
            }
            if images.is_empty() {
                return Err(Error::Data(format!(
                    "no readable images in {} ({skipped} skipped)",
                    dir.display()
                )));
            }
            let n = images.len();
            Ok(Dataset {
                images,
                resolution: res,
                poses: vec![None; n],
                skipped,
            })
        }
    }
}

/// Networks and their parameters.
pub struct Model {
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Model {
    pub fn build(cfg: &TrainConfig, store: &mut ParamStore) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::build(store, &cfg.generator, &mut rng)?;
        let discriminator = Discriminator::build(store, &cfg.discriminator, &mut rng)?;
        Ok(Self {
            generator,
            discriminator,
        })
    }
}

/// Inputs of one generator sample, fixed so the objective is a
/// deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct GenSample {
    pub z: Vec<f64>,
    /// Second latent and crossover for mixing regularization.
    pub mix: Option<(Vec<f64>, usize)>,
    pub pose: CameraPose,
    /// Low-resolution pixels for the NeRF-path term.
    pub pixels: Vec<usize>,
    pub sampling_seed: u64,
}

impl GenSample {
    pub fn draw<R: Rng + ?Sized>(gen: &Generator, cfg: &TrainConfig, rng: &mut R) -> Self {
        let z = LatentZ::sample(cfg.generator.styles.z_dim, rng).0;
        let mix = if rng.random::<f64>() < cfg.generator.styles.mixing_prob {
            let z2 = LatentZ::sample(cfg.generator.styles.z_dim, rng).0;
            Some((z2, rng.random_range(1..gen.layer_count())))
        } else {
            None
        };
        let pose = sample_pose(&cfg.generator.camera, rng);
        let base = cfg.generator.base_resolution;
        let k = cfg.loss.nerf_pixels.min(base * base);
        let pixels = sample_indices(rng, base * base, k).into_vec();
        Self {
            z,
            mix,
            pose,
            pixels,
            sampling_seed: rng.random(),
        }
    }
}

pub struct GenObjective {
    pub loss: Var,
    pub adversarial: Var,
    pub nerf_path: Option<Var>,
    pub image: Var,
    pub w: Var,
}

/// Style rows for a sample: mapped latent broadcast, optionally mixed.
pub fn sample_styles(ctx: &mut Ctx, gen: &Generator, s: &GenSample) -> (Vec<Var>, Var) {
    let z = ctx.tape.row_leaf(&s.z);
    let w = gen.mapping.forward(ctx, z);
    let mut styles = vec![w; gen.layer_count()];
    if let Some((z2, cross)) = &s.mix {
        let z2 = ctx.tape.row_leaf(z2);
        let w2 = gen.mapping.forward(ctx, z2);
        for row in styles.iter_mut().skip(*cross) {
            *row = w2;
        }
    }
    (styles, w)
}

/// `softplus(−D(G(z))) + β·L_nerf` (the NeRF term only outside stage 1).
pub fn generator_objective(
    ctx: &mut Ctx,
    model: &Model,
    cfg: &TrainConfig,
    sample: &GenSample,
    st: &ScheduleState,
    counter: &EvalCounter,
) -> Result<GenObjective> {
    let gen = &model.generator;
    let plan = gen.active_architecture(st);
    let (styles, w) = sample_styles(ctx, gen, sample);
    let want_nerf = !plan.nerf_only && cfg.loss.nerf_beta > 0.0;
    let opts = SynthOptions {
        stratified: true,
        nerf_rgb: want_nerf,
        noise: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sample.sampling_seed);
    let out = gen.synthesize(ctx, &styles, &sample.pose, &plan, &opts, &mut rng, counter)?;
    let score = model
        .discriminator
        .forward(ctx, out.image, out.resolution, plan.alpha)?;
    let adversarial = g_loss_var(ctx, score);
    let mut loss = adversarial;
    let mut nerf_path = None;
    if want_nerf {
        let base = cfg.generator.base_resolution;
        let map = aligned_index_map(base, out.resolution, out.resolution / base);
        let np = nerf_path_loss(ctx, out.image, out.nerf_rgb.expect("requested"), &map, &sample.pixels)?;
        let weighted = ctx.tape.scale(np, cfg.loss.nerf_beta);
        loss = ctx.tape.add(loss, weighted);
        nerf_path = Some(np);
    }
    Ok(GenObjective {
        loss,
        adversarial,
        nerf_path,
        image: out.image,
        w,
    })
}

pub struct DiscObjective {
    pub loss: Var,
    pub gan: Var,
    pub r1: Option<Var>,
}

/// `softplus(D(fake)) + softplus(−D(real))`, plus `r1_weight·λ‖∇D(real)‖²`
/// when `r1_weight > 0`.
pub fn discriminator_objective(
    ctx: &mut Ctx,
    model: &Model,
    cfg: &TrainConfig,
    fake: &Mat,
    real: &Mat,
    res: usize,
    alpha: f64,
    r1_weight: f64,
) -> Result<DiscObjective> {
    let d = &model.discriminator;
    let f = ctx.tape.leaf(fake.clone());
    let r = ctx.tape.leaf(real.clone());
    let sf = d.forward(ctx, f, res, alpha)?;
    let (sr, r1) = if r1_weight > 0.0 && cfg.loss.r1_gamma > 0.0 {
        let (pen, sr) = r1_penalty(ctx, d, r, res, alpha, cfg.loss.r1_gamma)?;
        (sr, Some(pen))
    } else {
        (d.forward(ctx, r, res, alpha)?, None)
    };
    let gan = d_loss_var(ctx, sf, sr);
    let loss = match r1 {
        Some(p) => {
            let p = ctx.tape.scale(p, r1_weight);
            ctx.tape.add(gan, p)
        }
        None => gan,
    };
    Ok(DiscObjective { loss, gan, r1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub images_seen: u64,
    pub resolution: usize,
    pub alpha: f64,
    pub stage: u8,
    pub g_loss: f64,
    pub d_loss: f64,
    pub r1: Option<f64>,
    pub nerf_path: f64,
    pub millis: u64,
}

pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: Model,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub images_seen: u64,
    pub step: u64,
}

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Diverged(format!("{what} is {x}")))
    }
}

fn accumulate(acc: &mut [Mat], grads: Vec<Mat>, scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.scaled_add(scale, &g);
    }
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let cfg = cfg.resolved()?;
        let mut params = ParamStore::new();
        let model = Model::build(&cfg, &mut params)?;
        let g_ids = params.ids_in(&[Group::Mapping, Group::Synthesis]);
        let d_ids = params.ids_in(&[Group::Discriminator]);
        let adam_g = Adam::new(cfg.adam, &params, g_ids);
        let adam_d = Adam::new(cfg.adam, &params, d_ids);
        let ema = params.clone();
        Ok(Self {
            cfg,
            model,
            params,
            ema,
            adam_g,
            adam_d,
            images_seen: 0,
            step: 0,
        })
    }

    pub fn schedule_state(&self) -> ScheduleState {
        schedule_resolve(self.images_seen, &self.cfg.schedule)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let started = Instant::now();
        let backup = self.params.clone();
        let adam_backup = (self.adam_g.clone(), self.adam_d.clone());
        match self.step_inner(data, started) {
            Ok(m) => Ok(m),
            Err(e) => {
                log::error!("step {} failed: {e}; parameters restored", self.step);
                self.params = backup;
                self.adam_g = adam_backup.0;
                self.adam_d = adam_backup.1;
                Err(e)
            }
        }
    }

    fn step_inner(&mut self, data: &Dataset, started: Instant) -> Result<StepMetrics> {
        let cfg = self.cfg.clone();
        let st = self.schedule_state();
        let plan = self.model.generator.active_architecture(&st);
        let res = plan.resolution;
        let batch = cfg.batch;
        let counter = EvalCounter::default();
        let blur = cfg.generator.upsampler.blur.clone();
        let r1_weight = if cfg.loss.r1_interval > 0 && self.step % cfg.loss.r1_interval == 0 {
            cfg.loss.r1_interval as f64
        } else {
            0.0
        };

        // Discriminator.
        let d_ids = self.adam_d.ids.clone();
        let mut d_grads: Vec<Mat> = d_ids.iter().map(|id| Mat::zeros(self.params.get(*id).dim())).collect();
        let mut d_loss = 0.0;
        let mut r1_total = 0.0;
        for k in 0..batch {
            let n = self.images_seen + k as u64;
            let mut rng = derived_rng(cfg.seed, TAG_D_FAKE, n);
            let sample = GenSample::draw(&self.model.generator, &cfg, &mut rng);
            let fake = {
                let mut ctx = Ctx::new(&self.params);
                let (styles, _) = sample_styles(&mut ctx, &self.model.generator, &sample);
                let mut srng = ChaCha8Rng::seed_from_u64(sample.sampling_seed);
                let opts = SynthOptions {
                    stratified: true,
                    nerf_rgb: false,
                    noise: None,
                };
                let out = self.model.generator.synthesize(
                    &mut ctx,
                    &styles,
                    &sample.pose,
                    &plan,
                    &opts,
                    &mut srng,
                    &counter,
                )?;
                ctx.tape.value(out.image).clone()
            };
            let mut rrng = derived_rng(cfg.seed, TAG_D_REAL, n);
            let idx = rrng.random_range(0..data.len());
            let real = fade_real(&data.at_resolution(idx, res)?, res, plan.alpha, &blur);
            let mut ctx = Ctx::new(&self.params);
            let obj = discriminator_objective(&mut ctx, &self.model, &cfg, &fake, &real, res, plan.alpha, r1_weight)?;
            d_loss += finite(ctx.tape.scalar(obj.gan), "d_loss")? / batch as f64;
            if let Some(r1) = obj.r1 {
                r1_total += finite(ctx.tape.scalar(r1), "r1")? / batch as f64;
            }
            let grads = ctx.param_grads(obj.loss, &d_ids);
            accumulate(&mut d_grads, grads, 1.0 / batch as f64);
        }
        check_grads(&d_grads, "discriminator")?;
        self.adam_d.step(&mut self.params, &d_grads, |_| 1.0);

        // Generator.
        let g_ids = self.adam_g.ids.clone();
        let mut g_grads: Vec<Mat> = g_ids.iter().map(|id| Mat::zeros(self.params.get(*id).dim())).collect();
        let mut g_loss = 0.0;
        let mut nerf_total = 0.0;
        let mut w_sum = Mat::zeros((1, cfg.generator.styles.w_dim));
        for k in 0..batch {
            let n = self.images_seen + k as u64;
            let mut rng = derived_rng(cfg.seed, TAG_G, n);
            let sample = GenSample::draw(&self.model.generator, &cfg, &mut rng);
            let mut ctx = Ctx::new(&self.params);
            let obj = generator_objective(&mut ctx, &self.model, &cfg, &sample, &st, &counter)?;
            g_loss += finite(ctx.tape.scalar(obj.adversarial), "g_loss")? / batch as f64;
            if let Some(np) = obj.nerf_path {
                nerf_total += finite(ctx.tape.scalar(np), "nerf_path")? / batch as f64;
            }
            w_sum += ctx.tape.value(obj.w);
            let grads = ctx.param_grads(obj.loss, &g_ids);
            accumulate(&mut g_grads, grads, 1.0 / batch as f64);
        }
        check_grads(&g_grads, "generator")?;
        let mapping_mul = cfg.generator.styles.mapping_lr_mul;
        self.adam_g.step(&mut self.params, &g_grads, |g| {
            if g == Group::Mapping {
                mapping_mul
            } else {
                1.0
            }
        });
        if !self.params.all_finite() {
            return Err(Error::Diverged("non-finite parameters after update".into()));
        }

        // Running averages.
        let w_avg = self.model.generator.w_avg;
        let mean_w = w_sum / batch as f64;
        let b = cfg.w_avg_beta;
        let avg = self.params.get(w_avg).clone();
        *self.params.get_mut(w_avg) = &avg * b + &mean_w * (1.0 - b);
        ema_update(&mut self.ema, &self.params, &g_ids, cfg.ema_beta());
        *self.ema.get_mut(w_avg) = self.params.get(w_avg).clone();

        self.images_seen += batch as u64;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            images_seen: self.images_seen,
            resolution: res,
            alpha: plan.alpha,
            stage: st.stage as u8,
            g_loss,
            d_loss,
            r1: (r1_weight > 0.0 && cfg.loss.r1_gamma > 0.0).then_some(r1_total),
            nerf_path: if st.stage == Stage::NerfOnly { 0.0 } else { nerf_total },
            millis: started.elapsed().as_millis() as u64,
        })
    }

    /// Runs `steps` steps, appending metrics as JSON lines to `log`.
    pub fn train(&mut self, data: &Dataset, steps: u64, mut log: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let m = self.train_step(data)?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&m).map_err(|e| Error::Numeric(e.to_string()))?;
                writeln!(w, "{line}")?;
            }
            out.push(m);
        }
        Ok(out)
    }
}

fn check_grads(grads: &[Mat], what: &str) -> Result<()> {
    if grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite {what} gradient")))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STYLEFLD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    images_seen: u64,
    step: u64,
    adam_g_steps: u64,
    adam_d_steps: u64,
    params: Vec<ParamMeta>,
}

fn put_mats<'a>(buf: &mut Vec<u8>, mats: impl Iterator<Item = &'a Mat>) {
    for m in mats {
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes the full training state.
pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        config: state.cfg.clone(),
        images_seen: state.images_seen,
        step: state.step,
        adam_g_steps: state.adam_g.steps,
        adam_d_steps: state.adam_d.steps,
        params: state
            .params
            .iter()
            .map(|(_, p)| ParamMeta {
                name: p.name.clone(),
                group: p.group,
                rows: p.value.nrows(),
                cols: p.value.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    put_mats(&mut buf, state.params.iter().map(|(_, p)| &p.value));
    put_mats(&mut buf, state.ema.iter().map(|(_, p)| &p.value));
    for adam in [&state.adam_g, &state.adam_d] {
        put_mats(&mut buf, adam.m.iter());
        put_mats(&mut buf, adam.v.iter());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("archive is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn fill(&mut self, m: &mut Mat) -> Result<()> {
        let n = m.len();
        let bytes = self.take(8 * n)?;
        for (v, chunk) in m.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint archive".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let mut state = TrainState::new(header.config)?;
    if state.params.len() != header.params.len() {
        return Err(Error::Corrupt("parameter table does not match the configuration".into()));
    }
    for ((_, p), meta) in state.params.iter().zip(&header.params) {
        if p.name != meta.name || p.group != meta.group || p.value.dim() != (meta.rows, meta.cols) {
            return Err(Error::Corrupt(format!("parameter {} does not match the configuration", meta.name)));
        }
    }
    let ids: Vec<ParamId> = state.params.ids().collect();
    for id in &ids {
        r.fill(state.params.get_mut(*id))?;
    }
    for id in &ids {
        r.fill(state.ema.get_mut(*id))?;
    }
    for adam in [&mut state.adam_g, &mut state.adam_d] {
        for m in adam.m.iter_mut() {
            r.fill(m)?;
        }
        for v in adam.v.iter_mut() {
            r.fill(v)?;
        }
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after parameter blocks".into()));
    }
    state.images_seen = header.images_seen;
    state.step = header.step;
    state.adam_g.steps = header.adam_g_steps;
    state.adam_d.steps = header.adam_d_steps;
    Ok(state)
}

pub fn checkpoint_load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
