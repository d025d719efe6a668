//! Command-line front end.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stylefield::config::TrainConfig;
use stylefield::evalsuite::{self, InvertConfig, PredictorConfig};
use stylefield::imageio::{load_square, save_png, scalar_map};
use stylefield::styles::{broadcast, interpolate};
use stylefield::trainer::{checkpoint_load, checkpoint_save, ingest, TrainState};
use stylefield::{Error, Result};

use crate::model::{LoadedModel, MixingSpec, StyleSpec};

#[derive(Parser, Debug)]
#[command(name = "stylefield", version, about = "Style-conditioned radiance field generator")]
pub struct Cli {
    /// Training/model configuration (TOML). Built-in defaults otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed: style seed for rendering commands, run seed for training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Checkpoint to load; a fresh model from --config otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PoseArgs {
    /// Pitch in radians.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<f64>,
    /// Yaw in radians.
    #[arg(long, allow_hyphen_values = true)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Field of view in degrees.
    #[arg(long)]
    pub fov: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the configured dataset as PNGs.
    MakeData,
    /// Train, or resume training from a checkpoint.
    Train {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Jump the schedule to the full-resolution stage (finetuning).
        #[arg(long)]
        resume_at_full: bool,
        /// Also write a checkpoint every this many steps.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
    },
    Render {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        pose: PoseArgs,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        psi: Option<f64>,
        /// Also write the base-resolution depth map here.
        #[arg(long)]
        depth_out: Option<PathBuf>,
    },
    /// Geometry from --seed, appearance after the crossover from --seed-b.
    Mix {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        pose: PoseArgs,
        #[arg(long)]
        seed_b: u64,
        #[arg(long)]
        crossover: usize,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        psi: Option<f64>,
    },
    /// Frames along the straight line between two styles.
    Interpolate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        pose: PoseArgs,
        /// Defaults to --seed.
        #[arg(long)]
        seed_a: Option<u64>,
        #[arg(long)]
        seed_b: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long)]
        res: Option<usize>,
    },
    /// Fit styles to a target image; the pose comes from a camera predictor
    /// unless given.
    Invert {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        pose: PoseArgs,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 600)]
        predictor_steps: usize,
    },
    EvalConsistency {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        pose: PoseArgs,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        deltas: Vec<f64>,
        #[arg(long)]
        res: Option<usize>,
    },
    ExtractGeometry {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 64)]
        grid: usize,
    },
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
        res: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Per-request budget; slower renders get a 503.
        #[arg(long, default_value_t = 10_000)]
        budget_ms: u64,
    },
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

/// The checkpoint's model when given, checked against --config; otherwise
/// a fresh model built from the config.
pub fn load_model(cli: &Cli, model: &ModelArgs) -> Result<LoadedModel> {
    match &model.checkpoint {
        Some(path) => {
            let m = LoadedModel::from_checkpoint(path)?;
            if let Some(cfg_path) = &cli.config {
                let cfg = TrainConfig::load(cfg_path)?;
                if cfg.generator != m.cfg.generator {
                    return Err(Error::Config(format!(
                        "generator section of {} does not match the checkpoint",
                        cfg_path.display()
                    )));
                }
            }
            Ok(m)
        }
        None => LoadedModel::fresh(load_config(cli.config.as_deref())?),
    }
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn pose_of(m: &LoadedModel, p: &PoseArgs) -> Result<stylefield::camera::CameraPose> {
    m.pose(p.theta, p.phi, p.radius, p.fov)
}

fn res_of(m: &LoadedModel, res: Option<usize>) -> usize {
    res.unwrap_or(m.cfg.generator.target_resolution)
}

/// Runs one parsed command; the JSON value is printed on success.
pub fn run(cli: &Cli) -> Result<serde_json::Value> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::MakeData => {
            let mut cfg = load_config(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.dataset.seed = s;
            }
            let data = ingest(&cfg.dataset, &cfg.generator.camera)?;
            let dir = out_path(cli, "data");
            fs::create_dir_all(&dir)?;
            for (i, img) in data.images.iter().enumerate() {
                save_png(img, data.resolution, &dir.join(format!("{i:05}.png")))?;
            }
            let poses: Vec<_> = data.poses.iter().collect();
            write_json(&dir.join("poses.json"), &json!(poses))?;
            Ok(json!({"images": data.len(), "skipped": data.skipped, "resolution": data.resolution, "out": dir}))
        }
        Command::Train {
            steps,
            resume,
            resume_at_full,
            checkpoint_every,
        } => train(cli, *steps, resume.as_deref(), *resume_at_full, *checkpoint_every),
        Command::Render {
            model,
            pose,
            res,
            psi,
            depth_out,
        } => {
            let m = load_model(cli, model)?;
            let res = res_of(&m, *res);
            let spec = StyleSpec {
                truncation: *psi,
                ..StyleSpec::seed(seed)
            };
            let pose = pose_of(&m, pose)?;
            let img = m.render(&spec, &pose, res)?;
            let out = out_path(cli, "render.png");
            ensure_parent(&out)?;
            save_png(&img.rgb, res, &out)?;
            if let Some(p) = depth_out {
                let n = img.base_resolution;
                ensure_parent(p)?;
                save_png(&scalar_map(&img.depth, n, pose.radius - 1.0, pose.radius + 1.0), n, p)?;
            }
            Ok(json!({"out": out, "resolution": res, "seed": seed, "model": m.id}))
        }
        Command::Mix {
            model,
            pose,
            seed_b,
            crossover,
            res,
            psi,
        } => {
            let m = load_model(cli, model)?;
            let res = res_of(&m, *res);
            let spec = StyleSpec {
                seed: Some(seed),
                mixing: Some(MixingSpec {
                    seed_b: *seed_b,
                    crossover_layer: *crossover,
                }),
                truncation: *psi,
                w: None,
            };
            let img = m.render(&spec, &pose_of(&m, pose)?, res)?;
            let out = out_path(cli, "mix.png");
            ensure_parent(&out)?;
            save_png(&img.rgb, res, &out)?;
            Ok(json!({"out": out, "aggregation_layer": m.generator.aggregation_layer(), "layers": m.layer_count()}))
        }
        Command::Interpolate {
            model,
            pose,
            seed_a,
            seed_b,
            frames,
            res,
        } => {
            if *frames < 2 {
                return Err(Error::Argument("need at least 2 frames".into()));
            }
            let m = load_model(cli, model)?;
            let res = res_of(&m, *res);
            m.check_resolution(res)?;
            let pose = pose_of(&m, pose)?;
            let a = m.style(seed_a.unwrap_or(seed), 1.0)?;
            let b = m.style(*seed_b, 1.0)?;
            let dir = out_path(cli, "frames");
            fs::create_dir_all(&dir)?;
            let mut files = Vec::new();
            for k in 0..*frames {
                let t = k as f64 / (*frames - 1) as f64;
                let stack = broadcast(&interpolate(&a, &b, t)?, m.layer_count())?;
                let img = m.generator.render(&m.store, &stack, &pose, res, None)?;
                let path = dir.join(format!("frame_{k:03}.png"));
                save_png(&img.rgb, res, &path)?;
                files.push(path);
            }
            Ok(json!({"frames": files}))
        }
        Command::Invert {
            model,
            pose,
            target,
            iters,
            lr,
            predictor_steps,
        } => {
            let m = load_model(cli, model)?;
            let res = m.cfg.generator.target_resolution;
            let img = load_square(target, res, true)?;
            let (pose, predictor) = match (pose.theta, pose.phi) {
                (Some(_), Some(_)) => (pose_of(&m, pose)?, None),
                (None, None) => {
                    let cfg = PredictorConfig {
                        steps: *predictor_steps,
                        seed,
                        ..Default::default()
                    };
                    let (pred, report) = evalsuite::train_camera_predictor(&m.generator, &m.store, &cfg)?;
                    (pred.predict_pose(&img, &m.cfg.generator.camera)?, Some(report.median_error_deg))
                }
                _ => return Err(Error::Argument("give both --theta and --phi, or neither".into())),
            };
            let inv = evalsuite::invert(&m.generator, &m.store, &img, &pose, &InvertConfig { iters: *iters, lr: *lr })?;
            let dir = out_path(cli, "inversion");
            fs::create_dir_all(&dir)?;
            let rec = m.generator.render(&m.store, &inv.styles, &pose, res, None)?;
            save_png(&rec.rgb, res, &dir.join("reconstruction.png"))?;
            let report = json!({
                "pose": inv.pose,
                "mse": inv.mse,
                "history": inv.history,
                "predictor_median_error_deg": predictor,
                "styles": inv.styles.rows.iter().map(|r| &r.0).collect::<Vec<_>>(),
            });
            write_json(&dir.join("inversion.json"), &report)?;
            Ok(json!({"out": dir, "mse": inv.mse, "pose": inv.pose}))
        }
        Command::EvalConsistency {
            model,
            pose,
            seeds,
            deltas,
            res,
        } => {
            let m = load_model(cli, model)?;
            let res = res_of(&m, *res);
            m.check_resolution(res)?;
            let pose = pose_of(&m, pose)?;
            let mut rows = Vec::new();
            let (mut monotone, mut convex) = (0u64, 0u64);
            for s in seed..seed + seeds {
                let stack = broadcast(&m.style(s, 1.0)?, m.layer_count())?;
                let r = evalsuite::consistency_sweep(&m.generator, &m.store, &stack, &pose, deltas, res)?;
                if r.change.windows(2).all(|w| w[0] < w[1]) {
                    monotone += 1;
                }
                if r.convexity.is_some_and(|c| c > 0.0) {
                    convex += 1;
                }
                rows.push(json!({
                    "seed": s,
                    "change": r.change,
                    "convexity": r.convexity,
                    "evaluations": r.evaluations,
                    "millis_per_frame": r.millis_per_frame,
                }));
            }
            let n = (*seeds).max(1) as f64;
            let report = json!({
                "deltas_deg": deltas,
                "resolution": res,
                "monotone_fraction": monotone as f64 / n,
                "convex_fraction": convex as f64 / n,
                "seeds": rows,
            });
            if let Some(p) = &cli.out {
                write_json(p, &report)?;
            }
            Ok(report)
        }
        Command::ExtractGeometry { model, grid } => {
            let m = load_model(cli, model)?;
            let stack = broadcast(&m.style(seed, 1.0)?, m.layer_count())?;
            let g = evalsuite::extract_geometry(&m.generator, &m.store, &stack, *grid)?;
            let out = out_path(cli, "mesh.txt");
            ensure_parent(&out)?;
            fs::write(&out, g.mesh.to_text())?;
            Ok(json!({
                "out": out,
                "vertices": g.mesh.vertices.len(),
                "triangles": g.mesh.triangles.len(),
                "empty": g.empty,
                "iso": g.iso,
            }))
        }
        Command::Bench { model, res, repeats } => {
            let m = load_model(cli, model)?;
            let stack = broadcast(&m.style(seed, 1.0)?, m.layer_count())?;
            let report = evalsuite::bench(&m.generator, &m.store, &stack, res, *repeats)?;
            let v = serde_json::to_value(&report).map_err(|e| Error::Numeric(e.to_string()))?;
            if let Some(p) = &cli.out {
                write_json(p, &v)?;
            }
            Ok(v)
        }
        Command::Serve {
            model,
            host,
            port,
            budget_ms,
        } => {
            let checkpoint = std::env::var_os("STYLENERF_CHECKPOINT")
                .map(PathBuf::from)
                .or_else(|| model.checkpoint.clone());
            let port = match std::env::var("STYLENERF_PORT") {
                Ok(p) => p
                    .parse()
                    .map_err(|_| Error::Argument(format!("STYLENERF_PORT is not a port: {p}")))?,
                Err(_) => *port,
            };
            let source = match checkpoint {
                Some(p) => crate::service::ModelSource::Checkpoint(p),
                None => crate::service::ModelSource::Config(load_config(cli.config.as_deref())?),
            };
            let opts = crate::service::ServeOptions {
                source,
                budget: std::time::Duration::from_millis(*budget_ms),
            };
            crate::service::serve_blocking(&format!("{host}:{port}"), opts)?;
            Ok(json!({"stopped": true}))
        }
    }
}

fn train(cli: &Cli, steps: Option<u64>, resume: Option<&Path>, at_full: bool, every: u64) -> Result<serde_json::Value> {
    let mut st = match resume {
        Some(p) => {
            let mut st = checkpoint_load(p)?;
            // A new config may swap the data and loss settings, not the networks.
            if let Some(cfg_path) = &cli.config {
                let cfg = TrainConfig::load(cfg_path)?;
                if cfg.generator != st.cfg.generator || cfg.discriminator != st.cfg.discriminator {
                    return Err(Error::Config("--config describes different networks than the checkpoint".into()));
                }
                st.cfg.dataset = cfg.dataset;
                st.cfg.loss = cfg.loss;
                st.cfg.batch = cfg.batch;
            }
            if let Some(s) = cli.seed {
                st.cfg.seed = s;
            }
            st
        }
        None => {
            let mut cfg = load_config(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            TrainState::new(cfg)?
        }
    };
    if at_full {
        st.images_seen = st.images_seen.max(st.cfg.schedule.t2);
    }
    let data = ingest(&st.cfg.dataset, &st.cfg.generator.camera)?;
    let batch = st.cfg.batch as u64;
    let steps = steps.unwrap_or_else(|| st.cfg.schedule.t3.saturating_sub(st.images_seen).div_ceil(batch));
    let dir = out_path(cli, "run");
    fs::create_dir_all(&dir)?;
    let mut log = OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?;
    let chunk = if every == 0 { steps.max(1) } else { every };
    let mut done = 0;
    let mut last = None;
    while done < steps {
        let n = chunk.min(steps - done);
        let m = st.train(&data, n, Some(&mut log))?;
        done += n;
        last = m.last().cloned();
        if every > 0 {
            checkpoint_save(&st, &dir.join(format!("ckpt_{:06}.sfc", st.step)))?;
        }
        log::info!("step {} images {}", st.step, st.images_seen);
    }
    let final_path = dir.join("final.sfc");
    checkpoint_save(&st, &final_path)?;
    Ok(json!({
        "checkpoint": final_path,
        "steps": done,
        "step": st.step,
        "images_seen": st.images_seen,
        "last": last,
    }))
}
