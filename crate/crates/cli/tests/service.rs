use std::path::Path;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use stylefield::config::TrainConfig;
use stylefield::imageio::encode_png;
use stylefield_cli::model::{style_digest, LoadedModel, StyleSpec};
use stylefield_cli::service::{spawn, ModelSource, ServeOptions};
use tokio_tungstenite::tungstenite::Message;

fn micro() -> TrainConfig {
    TrainConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.toml")).unwrap()
}

async fn start(source: ModelSource, budget_ms: u64) -> String {
    let opts = ServeOptions {
        source,
        budget: Duration::from_millis(budget_ms),
    };
    let (addr, _, _) = spawn("127.0.0.1:0", opts).await.unwrap();
    format!("http://{addr}")
}

async fn ready(base: &str) -> serde_json::Value {
    for _ in 0..200 {
        let v: serde_json::Value = reqwest::get(format!("{base}/health")).await.unwrap().json().await.unwrap();
        if v["status"] != "loading" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("model never loaded");
}

fn body(seed: u64) -> serde_json::Value {
    serde_json::json!({"pose": {"theta": 0.1, "phi": -0.2}, "seed": seed, "resolution": 8})
}

async fn post(base: &str, v: &serde_json::Value) -> reqwest::Response {
    reqwest::Client::new()
        .post(format!("{base}/render"))
        .body(v.to_string())
        .send()
        .await
        .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_render_and_styles() {
    let base = start(ModelSource::Config(micro()), 30_000).await;
    let h = ready(&base).await;
    assert_eq!(h["status"], "ready");
    assert_eq!(h["model"], "untrained");
    assert_eq!(h["resolutions"], serde_json::json!([4, 8]));

    let a = post(&base, &body(3)).await;
    assert_eq!(a.status(), 200);
    assert_eq!(a.headers()["content-type"], "image/png");
    let millis: u64 = a.headers()["x-render-millis"].to_str().unwrap().parse().unwrap();
    assert!(millis < 30_000);
    let a = a.bytes().await.unwrap();
    let b = post(&base, &body(3)).await.bytes().await.unwrap();
    assert_eq!(a, b);

    // Same bytes as rendering the model directly.
    let m = LoadedModel::fresh(micro()).unwrap();
    let pose = m.pose(Some(0.1), Some(-0.2), None, None).unwrap();
    let direct = m.render(&StyleSpec::seed(3), &pose, 8).unwrap();
    assert_eq!(a.to_vec(), encode_png(&direct.rgb, 8).unwrap());

    let s: serde_json::Value = reqwest::get(format!("{base}/styles/sample?seed=3")).await.unwrap().json().await.unwrap();
    assert_eq!(s["digest"], style_digest(&m.style(3, 1.0).unwrap()));
    assert_eq!(s["w"].as_array().unwrap().len(), 6);
    let missing = reqwest::get(format!("{base}/styles/sample")).await.unwrap();
    assert_eq!(missing.status(), 400);

    // An explicit w reproduces the seed's render.
    let w = s["w"].clone();
    let explicit = serde_json::json!({"pose": {"theta": 0.1, "phi": -0.2}, "w": w, "resolution": 8});
    assert_eq!(post(&base, &explicit).await.bytes().await.unwrap(), a);

    let r: serde_json::Value = reqwest::Client::new()
        .post(format!("{base}/reload"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(r["status"], "ready");
    assert_eq!(post(&base, &body(3)).await.bytes().await.unwrap(), a);
}

async fn error_of(resp: reqwest::Response) -> (u16, serde_json::Value) {
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_requests_name_the_field() {
    let base = start(ModelSource::Config(micro()), 30_000).await;
    ready(&base).await;
    let client = reqwest::Client::new();
    let raw = |s: &'static str| client.post(format!("{base}/render")).body(s).send();

    let (st, e) = error_of(raw("{not json").await.unwrap()).await;
    assert_eq!(st, 400);
    assert_eq!(e["error"], "bad_request");

    let (st, e) = error_of(raw(r#"{"pose": {"theta": "up", "phi": 0}, "seed": 1}"#).await.unwrap()).await;
    assert_eq!((st, e["field"].as_str()), (400, Some("pose.theta")));

    let (st, e) = error_of(raw(r#"{"seed": 1}"#).await.unwrap()).await;
    assert_eq!(st, 400);
    assert!(e["message"].as_str().unwrap().contains("pose"));

    let mut both = body(1);
    both["w"] = serde_json::json!(vec![0.0; 6]);
    let (st, e) = error_of(post(&base, &both).await).await;
    assert_eq!((st, e["field"].as_str()), (400, Some("seed")));

    let mut res = body(1);
    res["resolution"] = serde_json::json!(16);
    let (st, e) = error_of(post(&base, &res).await).await;
    assert_eq!((st, e["field"].as_str()), (400, Some("resolution")));

    let mut short = body(1);
    short.as_object_mut().unwrap().remove("seed");
    short["w"] = serde_json::json!(vec![0.0; 3]);
    let (st, e) = error_of(post(&base, &short).await).await;
    assert_eq!((st, e["field"].as_str()), (400, Some("w")));

    let mut pose = body(1);
    pose["pose"]["fov"] = serde_json::json!(-3.0);
    let (st, e) = error_of(post(&base, &pose).await).await;
    assert_eq!((st, e["field"].as_str()), (400, Some("pose")));

    let mut unknown = body(1);
    unknown["checkpoint"] = serde_json::json!("someone-else");
    let (st, _) = error_of(post(&base, &unknown).await).await;
    assert_eq!(st, 404);
    unknown["checkpoint"] = serde_json::json!("untrained");
    assert_eq!(post(&base, &unknown).await.status(), 200);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn over_budget_and_unloaded_requests_get_503() {
    // The desk model takes far longer than 1 ms per frame.
    let desk = TrainConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    let base = start(ModelSource::Config(desk), 1).await;
    ready(&base).await;
    let mut slow = body(1);
    slow["resolution"] = serde_json::json!(64);
    let resp = post(&base, &slow).await;
    assert_eq!(resp.status(), 503);
    assert_eq!(resp.headers()["retry-after"], "1");
    let e: serde_json::Value = resp.json().await.unwrap();
    assert_eq!(e["retry_after_secs"], 1);

    let base = start(ModelSource::Checkpoint("/nonexistent/model.sfc".into()), 1_000).await;
    let h = ready(&base).await;
    assert_eq!(h["status"], "failed");
    assert_eq!(post(&base, &body(1)).await.status(), 503);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_renders_match_serial_ones() {
    let base = start(ModelSource::Config(micro()), 60_000).await;
    ready(&base).await;
    let mut serial = Vec::new();
    for seed in 0..4 {
        serial.push(post(&base, &body(seed)).await.bytes().await.unwrap());
    }
    let handles: Vec<_> = (0..4)
        .map(|seed| {
            let base = base.clone();
            tokio::spawn(async move { post(&base, &body(seed)).await.bytes().await.unwrap() })
        })
        .collect();
    for (seed, h) in handles.into_iter().enumerate() {
        assert_eq!(h.await.unwrap(), serial[seed]);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stream_pushes_frames_for_pose_updates() {
    let base = start(ModelSource::Config(micro()), 30_000).await;
    ready(&base).await;
    let png = post(&base, &body(2)).await.bytes().await.unwrap();
    let ws_base = base.replace("http://", "ws://");

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{ws_base}/stream")).await.unwrap();
    ws.send(Message::Text(body(2).to_string().into())).await.unwrap();
    let meta: serde_json::Value = match ws.next().await.unwrap().unwrap() {
        Message::Text(t) => serde_json::from_str(&t).unwrap(),
        other => panic!("expected metadata, got {other:?}"),
    };
    assert_eq!((meta["seq"].as_u64(), meta["format"].as_str()), (Some(1), Some("jpeg")));
    match ws.next().await.unwrap().unwrap() {
        Message::Binary(b) => {
            assert_eq!(&b[..2], &[0xff, 0xd8]);
            assert_eq!(b.len() as u64, meta["bytes"].as_u64().unwrap());
        }
        other => panic!("expected a frame, got {other:?}"),
    }
    ws.send(Message::Text("{\"pose\": 1}".into())).await.unwrap();
    match ws.next().await.unwrap().unwrap() {
        Message::Text(t) => {
            let e: serde_json::Value = serde_json::from_str(&t).unwrap();
            assert_eq!((e["status"].as_u64(), e["field"].as_str()), (Some(400), Some("pose")));
        }
        other => panic!("expected an error, got {other:?}"),
    }

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{ws_base}/stream?lossless=true")).await.unwrap();
    ws.send(Message::Text(body(2).to_string().into())).await.unwrap();
    let _meta = ws.next().await.unwrap().unwrap();
    match ws.next().await.unwrap().unwrap() {
        Message::Binary(b) => assert_eq!(b.to_vec(), png.to_vec()),
        other => panic!("expected a frame, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn desk_scale_render_fits_the_latency_budget() {
    let desk = TrainConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    let base = start(ModelSource::Config(desk), 30_000).await;
    ready(&base).await;
    let mut req = body(1);
    req["resolution"] = serde_json::json!(64);
    let resp = post(&base, &req).await;
    assert_eq!(resp.status(), 200);
    let millis: u64 = resp.headers()["x-render-millis"].to_str().unwrap().parse().unwrap();
    assert!(millis < 2000, "{millis} ms");
}
