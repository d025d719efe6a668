//! The synthesis network: ray rendering at the base resolution, feature
//! aggregation, post-aggregation style blocks interleaved with 2× upsamplers,
//! RGB skip outputs, progressive variants and geometry-aware noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, grid_coord, CameraConfig, CameraPose};
use crate::error::{config, Error, Result};
use crate::field::{Activation, FieldConfig, FieldNet, ModulatedBlock};
use crate::mcubes::{marching_cubes, Grid, Mesh};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::renderer::{render_nerf_rgb, render_rays, EvalCounter, RayRender, SamplingConfig};
use crate::schedule::{doublings, ScheduleState, Stage};
use crate::styles::{LatentZ, MappingNetwork, StyleStack, StyleVector, StylesConfig};
use crate::tape::{Mat, Var};
use crate::upsampler::{nearest_blur, Upsampler, UpsamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    None,
    GeometryAware,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgressiveKind {
    Grow,
    InsertUpsampler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub styles: StylesConfig,
    pub field: FieldConfig,
    pub sampling: SamplingConfig,
    pub camera: CameraConfig,
    pub upsampler: UpsamplerConfig,
    pub base_resolution: usize,
    pub target_resolution: usize,
    /// `channels(res) = min(channel_max, channel_base / res)`.
    pub channel_base: usize,
    pub channel_max: usize,
    pub noise_mode: NoiseMode,
    /// Scale of injected noise maps.
    pub noise_strength: f64,
    /// Largest marching-cubes grid used for noise meshes.
    pub noise_grid_cap: usize,
    pub progressive_kind: ProgressiveKind,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            styles: StylesConfig::default(),
            field: FieldConfig::default(),
            sampling: SamplingConfig::default(),
            camera: CameraConfig::default(),
            upsampler: UpsamplerConfig::default(),
            base_resolution: 32,
            target_resolution: 256,
            channel_base: 32 * 1024,
            channel_max: 512,
            noise_mode: NoiseMode::None,
            noise_strength: 0.1,
            noise_grid_cap: 64,
            progressive_kind: ProgressiveKind::Grow,
        }
    }
}

impl GeneratorConfig {
    pub fn channels(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_max)
    }

    pub fn stage_count(&self) -> Result<usize> {
        doublings(self.base_resolution, self.target_resolution)
    }

    /// Supported output resolutions, base first.
    pub fn resolutions(&self) -> Vec<usize> {
        let k = self.stage_count().unwrap_or(0);
        (0..=k).map(|s| self.base_resolution << s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_resolution < self.base_resolution {
            return Err(config(format!(
                "target resolution {} is below the base resolution {}",
                self.target_resolution, self.base_resolution
            )));
        }
        self.stage_count()?;
        self.field.validate()?;
        self.sampling.validate()?;
        self.upsampler.validate()?;
        self.camera.distribution.validate()?;
        if self.camera.radius >= self.field.background_start {
            return Err(config("camera must sit inside the background start radius"));
        }
        Ok(())
    }
}

/// Which parts of the network run for a given training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    /// Output is the per-point color path at the base resolution.
    pub nerf_only: bool,
    /// Post-aggregation stages that run.
    pub stages: usize,
    /// Whether each running stage doubles the resolution.
    pub upsample: Vec<bool>,
    /// Blend weight of the last stage against its upsampled input.
    pub alpha: f64,
    pub resolution: usize,
}

#[derive(Clone, Debug)]
pub struct StageNet {
    pub resolution: usize,
    pub upsampler: Upsampler,
    pub blocks: [ModulatedBlock; 2],
    pub to_rgb: ModulatedBlock,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub mapping: MappingNetwork,
    pub field: FieldNet,
    pub stages: Vec<StageNet>,
    /// Running mean of mapped styles.
    pub w_avg: ParamId,
}

/// A grid produced by the 2D path, for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct AuxGrid {
    pub resolution: usize,
    pub channels: usize,
    pub grid: Var,
}

pub struct Synthesis {
    /// `res²×3`, pre-squash.
    pub image: Var,
    pub resolution: usize,
    /// Per-point color path at the base resolution (`base²×3`).
    pub nerf_rgb: Option<Var>,
    pub render: RayRender,
    pub aux: Vec<AuxGrid>,
    /// Upsampled previous output and the new stage's output when fading.
    pub branches: Option<(Var, Var)>,
}

#[derive(Clone, Copy, Default)]
pub struct SynthOptions<'a> {
    pub stratified: bool,
    /// Also compute the per-point color path when the 2D path is active.
    pub nerf_rgb: bool,
    pub noise: Option<&'a GeometryNoise>,
}

/// Plain-valued rendering result.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub resolution: usize,
    /// `res²×3`, pre-squash.
    pub rgb: Mat,
    /// Base-resolution expected depth.
    pub depth: Vec<f64>,
    /// Foreground opacity per base-resolution pixel.
    pub alpha: Vec<f64>,
    pub base_resolution: usize,
}

impl Generator {
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w_dim = cfg.styles.w_dim;
        let mapping = MappingNetwork::build(store, &cfg.styles, rng)?;
        let base = cfg.base_resolution;
        let field = FieldNet::build(store, &cfg.field, w_dim, cfg.channels(base), rng)?;
        let act = Activation::LeakyRelu;
        let mut stages = Vec::new();
        for s in 0..cfg.stage_count()? {
            let lo = base << s;
            let hi = lo * 2;
            let (c_lo, c_hi) = (cfg.channels(lo), cfg.channels(hi));
            let name = format!("stage{hi}");
            let upsampler = Upsampler::build(store, &format!("{name}.up"), &cfg.upsampler, c_lo, rng)?;
            let b0 = ModulatedBlock::build(store, &format!("{name}.conv0"), w_dim, c_lo, c_hi, true, act, rng);
            let b1 = ModulatedBlock::build(store, &format!("{name}.conv1"), w_dim, c_hi, c_hi, true, act, rng);
            let to_rgb = ModulatedBlock::build(
                store,
                &format!("{name}.torgb"),
                w_dim,
                c_hi,
                3,
                false,
                Activation::Identity,
                rng,
            );
            stages.push(StageNet {
                resolution: hi,
                upsampler,
                blocks: [b0, b1],
                to_rgb,
            });
        }
        let w_avg = store.add_const("mapping.w_avg", Group::Buffer, (1, w_dim), 0.0);
        Ok(Self {
            cfg: cfg.clone(),
            mapping,
            field,
            stages,
            w_avg,
        })
    }

    /// Style rows consumed: pre-aggregation blocks, the post-aggregation
    /// trunk, then three per upsampling stage.
    pub fn layer_count(&self) -> usize {
        self.field.style_layers() + 3 * self.stages.len()
    }

    /// Index of the first style row used after aggregation.
    pub fn aggregation_layer(&self) -> usize {
        self.cfg.field.n_sigma
    }

    /// Post-aggregation blocks that accept noise, in order.
    pub fn noise_slots(&self) -> Vec<usize> {
        let base = self.cfg.base_resolution;
        let trunk = self.cfg.field.n_c - self.cfg.field.n_sigma;
        let mut out = vec![base; trunk];
        for st in &self.stages {
            out.push(st.resolution);
            out.push(st.resolution);
        }
        out
    }

    pub fn full_plan(&self) -> LayerPlan {
        LayerPlan {
            nerf_only: false,
            stages: self.stages.len(),
            upsample: vec![true; self.stages.len()],
            alpha: 1.0,
            resolution: self.cfg.target_resolution,
        }
    }

    /// Plan for inference at one of the supported resolutions.
    pub fn plan_for_resolution(&self, res: usize) -> Result<LayerPlan> {
        let k = doublings(self.cfg.base_resolution, res)
            .map_err(|_| Error::Argument(format!("resolution {res} is not in {:?}", self.cfg.resolutions())))?;
        if k > self.stages.len() {
            return Err(Error::Argument(format!(
                "resolution {res} is not in {:?}",
                self.cfg.resolutions()
            )));
        }
        Ok(LayerPlan {
            nerf_only: false,
            stages: k,
            upsample: vec![true; k],
            alpha: 1.0,
            resolution: res,
        })
    }

    pub fn active_architecture(&self, st: &ScheduleState) -> LayerPlan {
        let base = self.cfg.base_resolution;
        let k = doublings(base, st.resolution).unwrap_or(0).min(self.stages.len());
        if st.stage == Stage::NerfOnly {
            return LayerPlan {
                nerf_only: true,
                stages: 0,
                upsample: Vec::new(),
                alpha: 1.0,
                resolution: base,
            };
        }
        match self.cfg.progressive_kind {
            ProgressiveKind::Grow => LayerPlan {
                nerf_only: false,
                stages: k,
                upsample: vec![true; k],
                alpha: st.alpha,
                resolution: st.resolution,
            },
            ProgressiveKind::InsertUpsampler => LayerPlan {
                nerf_only: false,
                stages: self.stages.len(),
                upsample: (0..self.stages.len()).map(|s| s < k).collect(),
                alpha: 1.0,
                resolution: st.resolution,
            },
        }
    }

    /// Binds a style stack as `1×w_dim` leaves.
    pub fn style_rows(&self, ctx: &mut Ctx, stack: &StyleStack) -> Result<Vec<Var>> {
        if stack.layer_count() != self.layer_count() {
            return Err(Error::Argument(format!(
                "style stack has {} rows, generator consumes {}",
                stack.layer_count(),
                self.layer_count()
            )));
        }
        Ok(stack.rows.iter().map(|r| ctx.tape.row_leaf(&r.0)).collect())
    }

    /// Style vector for a seed: latent drawn from a seeded stream, mapped,
    /// then optionally truncated toward the running mean.
    pub fn style_for_seed(&self, store: &ParamStore, seed: u64, psi: f64) -> Result<StyleVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = LatentZ::sample(self.cfg.styles.z_dim, &mut rng);
        let w = self.mapping.map_latent(store, &z)?;
        if psi == 1.0 {
            return Ok(w);
        }
        let mean = StyleVector(store.get(self.w_avg).iter().copied().collect());
        Ok(crate::styles::truncate(&w, &mean, psi))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn synthesize<R: Rng + ?Sized>(
        &self,
        ctx: &mut Ctx,
        styles: &[Var],
        pose: &CameraPose,
        plan: &LayerPlan,
        opts: &SynthOptions,
        rng: &mut R,
        counter: &EvalCounter,
    ) -> Result<Synthesis> {
        if styles.len() != self.layer_count() {
            return Err(Error::Argument(format!(
                "{} style rows given, generator consumes {}",
                styles.len(),
                self.layer_count()
            )));
        }
        for s in styles {
            if !ctx.tape.value(*s).iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric("non-finite style vector".into()));
            }
        }
        let base = self.cfg.base_resolution;
        let rays = generate_rays(pose, base, &self.cfg.camera)?;
        let sampling = if opts.stratified {
            self.cfg.sampling.clone()
        } else {
            self.cfg.sampling.deterministic()
        };
        let render = render_rays(ctx, &self.field, styles, &rays, &sampling, rng, counter)?;
        let nerf_rgb = if plan.nerf_only || opts.nerf_rgb {
            Some(render_nerf_rgb(ctx, &self.field, styles, &render)?)
        } else {
            None
        };
        if plan.nerf_only {
            return Ok(Synthesis {
                image: nerf_rgb.expect("requested above"),
                resolution: base,
                nerf_rgb,
                render,
                aux: Vec::new(),
                branches: None,
            });
        }

        let mut slot = 0usize;
        let mut noise_for = |ctx: &mut Ctx, n: usize| -> Option<Var> {
            let map = opts
                .noise
                .and_then(|g| g.map(slot, pose, n, base, &self.cfg.camera));
            slot += 1;
            map.map(|m| ctx.tape.leaf(m))
        };
        let trunk = self.cfg.field.n_c - self.cfg.field.n_sigma;
        let trunk_noise: Vec<Option<Var>> = (0..trunk).map(|_| noise_for(ctx, base)).collect();
        let mut x = self
            .field
            .color_trunk_forward(ctx, render.aggregated, styles, &trunk_noise);
        let mut aux = vec![AuxGrid {
            resolution: base,
            channels: ctx.tape.shape(x).1,
            grid: x,
        }];
        let mut rgb = self.field.color_head_forward(ctx, x, &rays.directions)?;
        let mut n = base;
        let mut branches = None;
        let first = self.field.style_layers();
        for s in 0..plan.stages {
            let st = &self.stages[s];
            let up = plan.upsample.get(s).copied().unwrap_or(true);
            if up {
                x = st.upsampler.forward(ctx, x, n)?;
            }
            let n_new = if up { 2 * n } else { n };
            let i = first + 3 * s;
            let nz = noise_for(ctx, n_new);
            x = st.blocks[0].forward(ctx, styles[i], x, nz);
            let nz = noise_for(ctx, n_new);
            x = st.blocks[1].forward(ctx, styles[i + 1], x, nz);
            aux.push(AuxGrid {
                resolution: n_new,
                channels: ctx.tape.shape(x).1,
                grid: x,
            });
            let new = st.to_rgb.forward(ctx, styles[i + 2], x, None);
            let prev = if up {
                nearest_blur(n, &self.cfg.upsampler.blur).record(ctx, rgb)
            } else {
                rgb
            };
            rgb = ctx.tape.add(prev, new);
            if s + 1 == plan.stages && plan.alpha < 1.0 {
                branches = Some((prev, rgb));
                rgb = ctx.tape.lerp(prev, rgb, plan.alpha);
            }
            n = n_new;
        }
        Ok(Synthesis {
            image: rgb,
            resolution: n,
            nerf_rgb,
            render,
            aux,
            branches,
        })
    }

    /// Deterministic inference render at a supported resolution.
    pub fn render(
        &self,
        store: &ParamStore,
        stack: &StyleStack,
        pose: &CameraPose,
        resolution: usize,
        noise: Option<&GeometryNoise>,
    ) -> Result<RenderedImage> {
        self.render_counted(store, stack, pose, resolution, noise, &EvalCounter::default())
    }

    /// [`Generator::render`], tallying field evaluations into `counter`.
    pub fn render_counted(
        &self,
        store: &ParamStore,
        stack: &StyleStack,
        pose: &CameraPose,
        resolution: usize,
        noise: Option<&GeometryNoise>,
        counter: &EvalCounter,
    ) -> Result<RenderedImage> {
        let plan = self.plan_for_resolution(resolution)?;
        let mut ctx = Ctx::new(store);
        let styles = self.style_rows(&mut ctx, stack)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = SynthOptions {
            stratified: false,
            nerf_rgb: false,
            noise,
        };
        let out = self.synthesize(&mut ctx, &styles, pose, &plan, &opts, &mut rng, counter)?;
        Ok(RenderedImage {
            resolution: out.resolution,
            rgb: ctx.tape.value(out.image).clone(),
            depth: out.render.depth.clone(),
            alpha: out.render.foreground_alpha.clone(),
            base_resolution: self.cfg.base_resolution,
        })
    }

    /// Foreground density on a cube grid; zero outside the unit sphere.
    pub fn density_grid(&self, store: &ParamStore, stack: &StyleStack, cells: usize) -> Result<Grid> {
        let pts = Grid::points(cells, 1.0);
        let mut values = vec![0.0; pts.len()];
        let inside: Vec<usize> = (0..pts.len())
            .filter(|&i| crate::camera::norm(pts[i]) <= 1.0)
            .collect();
        for chunk in inside.chunks(4096) {
            let mut ctx = Ctx::new(store);
            let styles = self.style_rows(&mut ctx, stack)?;
            let p: Vec<_> = chunk.iter().map(|&i| pts[i]).collect();
            let d = vec![[0.0, 0.0, -1.0]; p.len()];
            let ev = self.field.eval_foreground(&mut ctx, &p, &d, &styles, false)?;
            let sig = ctx.tape.value(ev.sigma);
            for (k, &i) in chunk.iter().enumerate() {
                values[i] = sig[[k, 0]];
            }
        }
        Ok(Grid {
            n: cells + 1,
            origin: [-1.0; 3],
            spacing: 2.0 / cells as f64,
            values,
        })
    }

    /// Density at which one mean sample interval reaches opacity 0.5.
    pub fn iso_level(&self) -> f64 {
        let spacing = 2.0 * self.cfg.camera.bounding_radius / self.cfg.sampling.foreground_per_ray() as f64;
        std::f64::consts::LN_2 / spacing
    }
}

/// Per-vertex Gaussian noise on extracted surfaces, rasterized per view.
#[derive(Clone, Debug)]
pub struct GeometryNoise {
    pub strength: f64,
    meshes: Vec<(usize, Mesh)>,
    /// Per noise slot: mesh index and per-vertex values.
    layers: Vec<Option<(usize, Vec<f64>)>>,
}

impl GeometryNoise {
    pub fn build(
        generator: &Generator,
        store: &ParamStore,
        stack: &StyleStack,
        seed: u64,
        strength: f64,
    ) -> Result<Self> {
        let cap = generator.cfg.noise_grid_cap.max(2);
        let iso = generator.iso_level();
        let mut meshes: Vec<(usize, Mesh)> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for res in generator.noise_slots() {
            let cells = res.min(cap);
            let mi = match meshes.iter().position(|(c, _)| *c == cells) {
                Some(i) => i,
                None => {
                    let grid = generator.density_grid(store, stack, cells)?;
                    meshes.push((cells, marching_cubes(&grid, iso)));
                    meshes.len() - 1
                }
            };
            let mesh = &meshes[mi].1;
            if mesh.is_empty() {
                log::warn!("density has no surface at grid {cells}; skipping noise for this block");
                layers.push(None);
                continue;
            }
            let values = (0..mesh.vertices.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            layers.push(Some((mi, values)));
        }
        Ok(Self {
            strength,
            meshes,
            layers,
        })
    }

    pub fn mesh(&self, slot: usize) -> Option<&Mesh> {
        self.layers
            .get(slot)?
            .as_ref()
            .map(|(mi, _)| &self.meshes[*mi].1)
    }

    /// Noise map (`n²×1`) for one slot, or `None` when skipped.
    pub fn map(&self, slot: usize, pose: &CameraPose, n: usize, base: usize, cam: &CameraConfig) -> Option<Mat> {
        let (mi, values) = self.layers.get(slot)?.as_ref()?;
        if self.strength == 0.0 {
            return None;
        }
        let raster = rasterize(&self.meshes[*mi].1, values, pose, n, 1.0 / base as f64, cam);
        Some(Mat::from_shape_vec((n * n, 1), raster.into_iter().map(|v| v * self.strength).collect()).ok()?)
    }
}

/// Z-buffered barycentric rasterization of per-vertex values onto the
/// `n×n` grid whose pixel coordinates use `offset`; uncovered pixels are 0.
pub fn rasterize(mesh: &Mesh, values: &[f64], pose: &CameraPose, n: usize, offset: f64, _cam: &CameraConfig) -> Vec<f64> {
    let frame = pose.frame();
    let proj: Vec<Option<(f64, f64, f64)>> = mesh.vertices.iter().map(|v| frame.project(*v)).collect();
    let mut depth = vec![f64::INFINITY; n * n];
    let mut out = vec![0.0; n * n];
    let to_px = |u: f64| (u + 1.0 - offset) * n as f64 / 2.0;
    for t in &mesh.triangles {
        let (Some(a), Some(b), Some(c)) = (proj[t[0]], proj[t[1]], proj[t[2]]) else {
            continue;
        };
        // Pixel space: x from u, y from −v.
        let pa = (to_px(a.0), to_px(-a.1));
        let pb = (to_px(b.0), to_px(-b.1));
        let pc = (to_px(c.0), to_px(-c.1));
        let area = (pb.0 - pa.0) * (pc.1 - pa.1) - (pc.0 - pa.0) * (pb.1 - pa.1);
        if area.abs() < 1e-15 {
            continue;
        }
        let lo_x = pa.0.min(pb.0).min(pc.0).floor().max(0.0) as usize;
        let hi_x = (pa.0.max(pb.0).max(pc.0).ceil().min(n as f64 - 1.0)).max(0.0) as usize;
        let lo_y = pa.1.min(pb.1).min(pc.1).floor().max(0.0) as usize;
        let hi_y = (pa.1.max(pb.1).max(pc.1).ceil().min(n as f64 - 1.0)).max(0.0) as usize;
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let (px, py) = (x as f64, y as f64);
                let w0 = ((pb.0 - px) * (pc.1 - py) - (pc.0 - px) * (pb.1 - py)) / area;
                let w1 = ((pc.0 - px) * (pa.1 - py) - (pa.0 - px) * (pc.1 - py)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < -1e-12 || w1 < -1e-12 || w2 < -1e-12 {
                    continue;
                }
                let z = w0 * a.2 + w1 * b.2 + w2 * c.2;
                let k = y * n + x;
                if z < depth[k] {
                    depth[k] = z;
                    out[k] = w0 * values[t[0]] + w1 * values[t[1]] + w2 * values[t[2]];
                }
            }
        }
    }
    out
}

/// Pixel coordinate `k` of an `n`-grid aligned with the base grid.
pub fn aligned_coord(k: usize, n: usize, base: usize) -> f64 {
    grid_coord(k, n, 1.0 / base as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_schedule_endpoints() {
        let c = GeneratorConfig::default();
        assert_eq!(c.channels(32), 512);
        assert_eq!(c.channels(64), 512);
        assert_eq!(c.channels(128), 256);
        assert_eq!(c.channels(1024), 32);
    }

    #[test]
    fn target_below_base_is_config_error() {
        let c = GeneratorConfig {
            target_resolution: 16,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
