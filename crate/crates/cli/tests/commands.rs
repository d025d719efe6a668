use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn micro() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.toml")
}

fn stylefield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylefield"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs with the micro config and expects success; returns stdout JSON.
fn ok(args: &[&str]) -> serde_json::Value {
    let cfg = micro();
    let mut all = vec!["--config", cfg.to_str().unwrap()];
    all.extend_from_slice(args);
    let out = stylefield(&all);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn render_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for p in [&a, &b] {
        ok(&["render", "--seed", "1", "--theta", "0", "--phi", "0", "--res", "8", "--out", s(p)]);
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let img = image::load_from_memory(&bytes).unwrap();
    assert_eq!((img.width(), img.height()), (8, 8));
}

#[test]
fn interpolation_starts_at_the_first_seed() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    let v = ok(&["interpolate", "--seed-a", "1", "--seed-b", "2", "--frames", "5", "--out", s(&frames)]);
    assert_eq!(v["frames"].as_array().unwrap().len(), 5);
    let single = dir.path().join("one.png");
    ok(&["render", "--seed", "1", "--out", s(&single)]);
    let first = std::fs::read(frames.join("frame_000.png")).unwrap();
    assert_eq!(first, std::fs::read(&single).unwrap());
    let last = std::fs::read(frames.join("frame_004.png")).unwrap();
    ok(&["render", "--seed", "2", "--out", s(&single)]);
    assert_eq!(last, std::fs::read(&single).unwrap());
}

#[test]
fn bench_reports_the_exact_budget_ratio() {
    let v = ok(&["bench", "--res", "32,256"]);
    assert_eq!(v["reference_base"], 32);
    let row = &v["rows"][1];
    assert_eq!(row["resolution"], 256);
    assert_eq!((row["budget"]["ratio_num"].as_u64(), row["budget"]["ratio_den"].as_u64()), (Some(64), Some(1)));
    let (full, approx) = (row["budget"]["full_total"].as_u64().unwrap(), row["budget"]["approx_total"].as_u64().unwrap());
    assert_eq!(full, 64 * approx);
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = stylefield(&["render", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
}

#[test]
fn failures_report_structured_stderr() {
    let cfg = micro();
    let out = stylefield(&["--config", s(&cfg), "render", "--res", "5"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "argument");
    assert!(err["message"].as_str().unwrap().contains("resolution 5"));

    let out = stylefield(&["render", "--checkpoint", "/nonexistent/x.sfc"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn training_resumes_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let v = ok(&["train", "--seed", "5", "--steps", "3", "--checkpoint-every", "2", "--out", s(d)]);
        assert_eq!(v["step"], 3);
    }
    let ckpt = a.join("final.sfc");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(b.join("final.sfc")).unwrap());
    assert!(a.join("ckpt_000002.sfc").exists() && a.join("ckpt_000003.sfc").exists());
    let lines = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);

    let v = ok(&["train", "--resume", s(&ckpt), "--steps", "2", "--out", s(&a)]);
    assert_eq!((v["step"].as_u64(), v["images_seen"].as_u64()), (Some(5), Some(10)));

    // Finetuning jumps to the full-resolution stage (t2 = 48 images).
    let v = ok(&["train", "--resume", s(&ckpt), "--resume-at-full", "--steps", "1", "--out", s(&b)]);
    assert_eq!(v["images_seen"], 50);
    assert_eq!(v["last"]["stage"], 3);

    let png = dir.path().join("c.png");
    let v = ok(&["render", "--checkpoint", s(&ckpt), "--out", s(&png)]);
    assert_eq!(v["model"], "final");

    // A config describing other networks is refused.
    let other = dir.path().join("other.toml");
    let text = std::fs::read_to_string(micro()).unwrap().replace("hidden_fg = 6", "hidden_fg = 7");
    std::fs::write(&other, text).unwrap();
    let out = stylefield(&["--config", s(&other), "render", "--checkpoint", s(&ckpt)]);
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn make_data_writes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&["make-data", "--out", s(dir.path())]);
    assert_eq!(v["images"], 12);
    assert!(dir.path().join("00011.png").exists());
    let poses: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("poses.json")).unwrap()).unwrap();
    assert_eq!(poses.as_array().unwrap().len(), 12);
}

#[test]
fn mixing_at_the_last_layer_is_the_pure_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (m, r) = (dir.path().join("m.png"), dir.path().join("r.png"));
    let v = ok(&["mix", "--seed", "1", "--seed-b", "2", "--crossover", "0", "--out", s(&m)]);
    let layers = v["layers"].as_u64().unwrap().to_string();
    ok(&["render", "--seed", "2", "--out", s(&r)]);
    assert_eq!(std::fs::read(&m).unwrap(), std::fs::read(&r).unwrap());
    ok(&["mix", "--seed", "1", "--seed-b", "2", "--crossover", &layers, "--out", s(&m)]);
    ok(&["render", "--seed", "1", "--out", s(&r)]);
    assert_eq!(std::fs::read(&m).unwrap(), std::fs::read(&r).unwrap());
}

#[test]
fn geometry_consistency_and_inversion_commands_run() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("mesh.txt");
    let v = ok(&["extract-geometry", "--grid", "8", "--out", s(&mesh)]);
    assert!(std::fs::read_to_string(&mesh).unwrap().starts_with("# vertices"));
    assert!(v["vertices"].is_u64());

    let report = dir.path().join("consistency.json");
    let v = ok(&["eval-consistency", "--seeds", "2", "--deltas", "1,5", "--out", s(&report)]);
    assert_eq!(v["seeds"].as_array().unwrap().len(), 2);
    assert_eq!(v["seeds"][0]["change"].as_array().unwrap().len(), 2);
    assert!(report.exists());

    let target = dir.path().join("t.png");
    ok(&["render", "--seed", "4", "--theta", "0.1", "--phi", "-0.2", "--out", s(&target)]);
    let inv = dir.path().join("inv");
    let v = ok(&[
        "invert", "--target", s(&target), "--theta", "0.1", "--phi", "-0.2", "--iters", "5", "--out", s(&inv),
    ]);
    assert!(v["mse"].as_f64().unwrap().is_finite());
    let full: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(inv.join("inversion.json")).unwrap()).unwrap();
    let h: Vec<f64> = full["history"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(h.len(), 6);
    assert!(h.windows(2).all(|p| p[1] <= p[0]));
    assert!(inv.join("reconstruction.png").exists());
}
