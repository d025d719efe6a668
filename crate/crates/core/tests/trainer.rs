mod common;

use common::micro_config;
use stylefield::camera::CameraConfig;
use stylefield::config::{DataSource, DatasetConfig};
use stylefield::params::Ctx;
use stylefield::renderer::EvalCounter;
use stylefield::schedule::{schedule_resolve, ProgressiveSchedule, Stage};
use stylefield::trainer::{
    checkpoint_bytes, checkpoint_from_bytes, checkpoint_load, checkpoint_save, derived_rng, generator_objective,
    ingest, GenSample, TrainState,
};
use stylefield::Error;

fn schedule() -> ProgressiveSchedule {
    ProgressiveSchedule {
        t1: 1_000,
        t2: 7_000,
        t3: 20_000,
        base_resolution: 32,
        target_resolution: 256,
    }
}

/// Growth progress as a real number: doublings completed plus fade.
fn level(images: u64, s: &ProgressiveSchedule) -> f64 {
    let st = schedule_resolve(images, s);
    if st.stage == Stage::NerfOnly {
        return 0.0;
    }
    let k = (st.resolution / s.base_resolution).trailing_zeros() as f64;
    k - 1.0 + st.alpha
}

#[test]
fn schedule_is_exact_at_milestones() {
    let s = schedule();
    let at = |n| schedule_resolve(n, &s);
    assert_eq!((at(0).resolution, at(0).alpha, at(0).stage), (32, 1.0, Stage::NerfOnly));
    assert_eq!((at(999).resolution, at(999).stage), (32, Stage::NerfOnly));
    assert_eq!((at(1_000).resolution, at(1_000).alpha, at(1_000).stage), (64, 0.0, Stage::Growing));
    assert_eq!((at(7_000).resolution, at(7_000).alpha, at(7_000).stage), (256, 1.0, Stage::Full));
    assert_eq!((at(20_000).resolution, at(20_000).alpha, at(20_000).stage), (256, 1.0, Stage::Full));
    // Each doubling gets an equal share of the growth window.
    assert_eq!((at(3_000).resolution, at(3_000).alpha), (128, 0.0));
    assert_eq!((at(5_000).resolution, at(5_000).alpha), (256, 0.0));
    assert_eq!((at(4_000).resolution, at(4_000).alpha), (128, 0.5));
}

#[test]
fn schedule_progress_is_continuous_and_monotone() {
    let s = schedule();
    let step = 1.0 / 2_000.0;
    let mut prev = level(s.t1, &s);
    assert_eq!(prev, 0.0);
    for n in s.t1 + 1..=s.t2 {
        let l = level(n, &s);
        assert!(l >= prev && l - prev <= step + 1e-12, "jump at {n}: {prev} → {l}");
        prev = l;
    }
    assert_eq!(prev, 3.0);
}

fn micro_state() -> (TrainState, stylefield::trainer::Dataset) {
    let cfg = micro_config();
    let data = ingest(&cfg.dataset, &cfg.generator.camera).unwrap();
    (TrainState::new(cfg).unwrap(), data)
}

#[test]
fn resumed_training_is_bit_identical() {
    let (mut a, data) = micro_state();
    // Start inside the growth window so fading, R1 and the NeRF-path term all run.
    a.images_seen = a.cfg.schedule.t1 - 4;
    let mut b_bytes = None;
    let mut metrics_a = Vec::new();
    for k in 0..10 {
        if k == 5 {
            b_bytes = Some(checkpoint_bytes(&a).unwrap());
        }
        metrics_a.push(a.train_step(&data).unwrap());
    }
    let mut b = checkpoint_from_bytes(&b_bytes.unwrap()).unwrap();
    let mut metrics_b = Vec::new();
    for _ in 5..10 {
        metrics_b.push(b.train_step(&data).unwrap());
    }
    for (x, y) in metrics_a[5..].iter().zip(&metrics_b) {
        assert_eq!(x.g_loss.to_bits(), y.g_loss.to_bits());
        assert_eq!(x.d_loss.to_bits(), y.d_loss.to_bits());
        assert_eq!(x.nerf_path.to_bits(), y.nerf_path.to_bits());
    }
    assert_eq!(a.images_seen, b.images_seen);
    for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
        assert!(p.value.iter().zip(q.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", p.name);
    }
    assert_eq!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&b).unwrap());
}

#[test]
fn save_load_save_is_byte_identical() {
    let (mut s, data) = micro_state();
    s.train(&data, 2, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.sfc");
    checkpoint_save(&s, &path).unwrap();
    let loaded = checkpoint_load(&path).unwrap();
    let path2 = dir.path().join("b.sfc");
    checkpoint_save(&loaded, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn damaged_archives_are_rejected() {
    let (s, _) = micro_state();
    let bytes = checkpoint_bytes(&s).unwrap();
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(checkpoint_from_bytes(&flipped), Err(Error::Corrupt(_))));
    assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 100]), Err(Error::Corrupt(_))));
    assert!(matches!(checkpoint_from_bytes(b"not a checkpoint"), Err(Error::Corrupt(_))));
    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&7u32.to_le_bytes());
    match checkpoint_from_bytes(&newer) {
        Err(Error::Version { found, expected }) => assert_eq!((found, expected), (7, 1)),
        other => panic!("expected a version error, got {:?}", other.err()),
    }
}

#[test]
fn image_folder_skips_unreadable_files() {
    let dir = tempfile::tempdir().unwrap();
    for (i, v) in [40u8, 200].iter().enumerate() {
        let img = image::RgbImage::from_pixel(12, 10, image::Rgb([*v, 0, 255]));
        img.save(dir.path().join(format!("{i}.png"))).unwrap();
    }
    std::fs::write(dir.path().join("broken.png"), b"garbage").unwrap();
    let cfg = DatasetConfig {
        source: DataSource::ImageFolder,
        path: Some(dir.path().to_path_buf()),
        resolution: 8,
        ..Default::default()
    };
    let data = ingest(&cfg, &Default::default()).unwrap();
    assert_eq!((data.len(), data.skipped), (2, 1));
    assert_eq!(data.images[0].dim(), (64, 3));
    // 255 → 1 and 0 → −1 in the training range.
    assert!((data.images[0][[10, 2]] - 1.0).abs() < 1e-9);
    assert!((data.images[0][[10, 1]] + 1.0).abs() < 1e-9);

    let empty = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        path: Some(empty.path().to_path_buf()),
        ..cfg
    };
    assert!(matches!(ingest(&cfg, &Default::default()), Err(Error::Data(_))));
}

#[test]
fn synthetic_spheres_fill_the_pixel_range() {
    let cfg = DatasetConfig {
        resolution: 32,
        count: 32,
        ..Default::default()
    };
    let cam = CameraConfig {
        fov: 45.0,
        radius: 1.0,
        bounding_radius: 0.5,
        ..Default::default()
    };
    let data = ingest(&cfg, &cam).unwrap();
    assert_eq!(data.len(), 32);
    let mut total = 0.0;
    for img in &data.images {
        assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
        total += img.mean().unwrap();
        // Both the object and the empty background are present.
        assert!(img.iter().any(|v| *v != 0.0) && img.iter().any(|v| *v == 0.0));
    }
    let mean = total / data.len() as f64;
    assert!(mean > -0.5 && mean < 0.5, "mean {mean}");
    let again = ingest(&cfg, &cam).unwrap();
    assert_eq!(data.images, again.images);
}

#[test]
fn generator_step_descends_without_nerf_term() {
    let mut cfg = micro_config();
    cfg.loss.nerf_beta = 0.0;
    let mut s = TrainState::new(cfg).unwrap();
    let st = schedule_resolve(s.cfg.schedule.t2, &s.cfg.schedule);
    let sample = GenSample::draw(&s.model.generator, &s.cfg, &mut derived_rng(5, 1, 0));
    let ids = s.adam_g.ids.clone();
    let eval = |s: &TrainState| {
        let mut ctx = Ctx::new(&s.params);
        let o = generator_objective(&mut ctx, &s.model, &s.cfg, &sample, &st, &EvalCounter::default()).unwrap();
        assert!(o.nerf_path.is_none());
        let v = ctx.tape.scalar(o.loss);
        (v, ctx.param_grads(o.loss, &ids))
    };
    let (before, grads) = eval(&s);
    for (id, g) in ids.iter().zip(&grads) {
        s.params.get_mut(*id).scaled_add(-1e-3, g);
    }
    let (after, _) = eval(&s);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn losses_stay_finite_over_a_short_run() {
    let (mut s, data) = micro_state();
    let m = s.train(&data, 6, None).unwrap();
    assert!(m.iter().all(|x| x.g_loss.is_finite() && x.d_loss.is_finite()));
    assert_eq!(s.images_seen, 6 * s.cfg.batch as u64);
    assert!(s.params.all_finite() && s.ema.all_finite());
}
