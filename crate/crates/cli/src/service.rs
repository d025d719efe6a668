//! HTTP rendering service.
//!
//! Handlers share one read-only model behind an `Arc`; a reload builds the
//! new model off to the side and swaps the pointer. Renders run on the
//! blocking pool behind a semaphore so `/health` always answers.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::FutureExt;
use serde::{Deserialize, Serialize};
use serde_json::json;
use stylefield::camera::CameraPose;
use stylefield::config::TrainConfig;
use stylefield::imageio::{encode_jpeg, encode_png};
use tokio::sync::Semaphore;

use crate::model::{style_digest, LoadedModel, MixingSpec, StyleSpec};

pub const RETRY_AFTER_SECS: u64 = 1;
pub const STREAM_JPEG_QUALITY: u8 = 85;

pub enum ModelSource {
    Checkpoint(PathBuf),
    Config(TrainConfig),
}

impl ModelSource {
    fn load(&self) -> stylefield::Result<LoadedModel> {
        match self {
            Self::Checkpoint(p) => LoadedModel::from_checkpoint(p),
            Self::Config(cfg) => LoadedModel::fresh(cfg.clone()),
        }
    }
}

pub struct ServeOptions {
    pub source: ModelSource,
    pub budget: Duration,
}

enum Slot {
    Loading,
    Ready(Arc<LoadedModel>),
    Failed(String),
}

struct Shared {
    slot: RwLock<Slot>,
    source: ModelSource,
    budget: Duration,
    renders: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(opts: ServeOptions) -> Self {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self(Arc::new(Shared {
            slot: RwLock::new(Slot::Loading),
            source: opts.source,
            budget: opts.budget,
            renders: Arc::new(Semaphore::new(workers)),
        }))
    }

    /// Loads (or reloads) from the configured source and swaps it in.
    pub async fn load(&self) -> Result<(), String> {
        let me = self.clone();
        let loaded = tokio::task::spawn_blocking(move || me.0.source.load())
            .await
            .map_err(|e| e.to_string())
            .and_then(|r| r.map_err(|e| e.to_string()));
        let mut slot = self.0.slot.write().unwrap_or_else(|e| e.into_inner());
        match loaded {
            Ok(m) => {
                log::info!("model {} ready", m.id);
                *slot = Slot::Ready(Arc::new(m));
                Ok(())
            }
            Err(e) => {
                log::error!("model load failed: {e}");
                // Keep serving the previous model if there is one.
                if !matches!(*slot, Slot::Ready(_)) {
                    *slot = Slot::Failed(e.clone());
                }
                Err(e)
            }
        }
    }

    fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        match &*self.0.slot.read().unwrap_or_else(|e| e.into_inner()) {
            Slot::Ready(m) => Ok(m.clone()),
            Slot::Loading => Err(ApiError::unavailable("model is loading")),
            Slot::Failed(e) => Err(ApiError::unavailable(format!("model failed to load: {e}"))),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    field: Option<String>,
    message: String,
}

impl ApiError {
    fn bad_request(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            field: Some(field.into()),
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            field: None,
            message: message.into(),
        }
    }

    fn unavailable(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            code: "unavailable",
            field: None,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            field: None,
            message: message.into(),
        }
    }

    fn body(&self) -> serde_json::Value {
        let mut v = json!({"error": self.code, "message": self.message});
        if let Some(f) = &self.field {
            v["field"] = json!(f);
        }
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            v["retry_after_secs"] = json!(RETRY_AFTER_SECS);
        }
        v
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(self.body())).into_response();
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_SECS));
        }
        resp
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseJson {
    pub theta: f64,
    pub phi: f64,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub fov: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    #[serde(default)]
    pub checkpoint: Option<String>,
    pub pose: PoseJson,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub w: Option<Vec<f64>>,
    /// Target resolution when absent.
    #[serde(default)]
    pub resolution: Option<usize>,
    #[serde(default)]
    pub mixing: Option<MixingSpec>,
    #[serde(default)]
    pub truncation: Option<f64>,
}

pub fn parse_request(body: &[u8]) -> Result<RenderRequest, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { String::new() } else { path };
        ApiError::bad_request(field, e.into_inner().to_string())
    })
}

struct Job {
    model: Arc<LoadedModel>,
    spec: StyleSpec,
    pose: CameraPose,
    resolution: usize,
}

/// Checks everything that can be blamed on a specific request field.
fn validate(model: Arc<LoadedModel>, req: RenderRequest) -> Result<Job, ApiError> {
    if let Some(id) = &req.checkpoint {
        if *id != model.id {
            return Err(ApiError::not_found(format!("unknown checkpoint {id:?}; serving {:?}", model.id)));
        }
    }
    match (&req.seed, &req.w) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("seed", "give exactly one of seed or w, not both")),
        (None, None) => return Err(ApiError::bad_request("seed", "one of seed or w is required")),
        _ => {}
    }
    if let Some(w) = &req.w {
        let dim = model.cfg.generator.styles.w_dim;
        if w.len() != dim {
            return Err(ApiError::bad_request("w", format!("expected {dim} entries, got {}", w.len())));
        }
    }
    if let Some(m) = &req.mixing {
        if m.crossover_layer > model.layer_count() {
            return Err(ApiError::bad_request(
                "mixing.crossover_layer",
                format!("must be at most {}", model.layer_count()),
            ));
        }
    }
    if let Some(psi) = req.truncation {
        if !psi.is_finite() {
            return Err(ApiError::bad_request("truncation", "must be finite"));
        }
    }
    let resolution = req.resolution.unwrap_or(model.cfg.generator.target_resolution);
    if !model.resolutions().contains(&resolution) {
        return Err(ApiError::bad_request(
            "resolution",
            format!("{resolution} is not one of {:?}", model.resolutions()),
        ));
    }
    let p = &req.pose;
    let pose = model
        .pose(Some(p.theta), Some(p.phi), p.radius, p.fov)
        .map_err(|e| ApiError::bad_request("pose", e.to_string()))?;
    Ok(Job {
        model,
        spec: StyleSpec {
            seed: req.seed,
            w: req.w,
            mixing: req.mixing,
            truncation: req.truncation,
        },
        pose,
        resolution,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Encoding {
    Png,
    Jpeg,
}

/// Renders within the request budget: waiting for a render slot and the
/// render itself both count against it.
async fn render_job(state: &AppState, job: Job, enc: Encoding) -> Result<(Vec<u8>, u64), ApiError> {
    let deadline = Instant::now() + state.0.budget;
    let permit = tokio::time::timeout(state.0.budget, state.0.renders.clone().acquire_owned())
        .await
        .map_err(|_| ApiError::unavailable("all render workers are busy"))?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let task = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let started = Instant::now();
        let img = job.model.render(&job.spec, &job.pose, job.resolution)?;
        let bytes = match enc {
            Encoding::Png => encode_png(&img.rgb, job.resolution)?,
            Encoding::Jpeg => encode_jpeg(&img.rgb, job.resolution, STREAM_JPEG_QUALITY)?,
        };
        Ok::<_, stylefield::Error>((bytes, started.elapsed().as_millis() as u64))
    });
    let left = deadline.saturating_duration_since(Instant::now());
    match tokio::time::timeout(left, task).await {
        Err(_) => Err(ApiError::unavailable(format!(
            "render exceeded the {} ms budget",
            state.0.budget.as_millis()
        ))),
        Ok(Err(e)) => Err(ApiError::internal(e.to_string())),
        Ok(Ok(Err(e))) => Err(match e {
            stylefield::Error::Argument(m) => ApiError::bad_request("", m),
            other => ApiError::internal(other.to_string()),
        }),
        Ok(Ok(Ok(r))) => Ok(r),
    }
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let slot = state.0.slot.read().unwrap_or_else(|e| e.into_inner());
    Json(match &*slot {
        Slot::Ready(m) => json!({
            "status": "ready",
            "model": m.id,
            "resolutions": m.resolutions(),
            "step": m.step,
            "layers": m.layer_count(),
            "aggregation_layer": m.generator.aggregation_layer(),
            "budget_ms": state.0.budget.as_millis() as u64,
        }),
        Slot::Loading => json!({"status": "loading", "model": null, "resolutions": []}),
        Slot::Failed(e) => json!({"status": "failed", "model": null, "resolutions": [], "message": e}),
    })
}

async fn render(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req = parse_request(&body)?;
    let job = validate(state.model()?, req)?;
    let (png, millis) = render_job(&state, job, Encoding::Png).await?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::HeaderName::from_static("x-render-millis"), HeaderValue::from(millis)),
        ],
        png,
    )
        .into_response())
}

async fn sample_style(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let seed: u64 = q
        .get("seed")
        .ok_or_else(|| ApiError::bad_request("seed", "query parameter is required"))?
        .parse()
        .map_err(|_| ApiError::bad_request("seed", "must be an unsigned integer"))?;
    let psi: f64 = match q.get("psi") {
        Some(s) => s
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| ApiError::bad_request("psi", "must be a finite number"))?,
        None => 1.0,
    };
    let model = state.model()?;
    let w = model.style(seed, psi).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(json!({
        "seed": seed,
        "psi": psi,
        "dim": w.dim(),
        "digest": style_digest(&w),
        "w": w.0,
    })))
}

async fn reload(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    state.load().await.map_err(ApiError::internal)?;
    let m = state.model()?;
    Ok(Json(json!({"status": "ready", "model": m.id, "step": m.step})))
}

async fn stream(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
    ws: WebSocketUpgrade,
) -> Response {
    let lossless = q.get("lossless").is_some_and(|v| matches!(v.as_str(), "1" | "true" | "yes"));
    ws.on_upgrade(move |socket| stream_session(state, socket, lossless))
}

/// One frame per pose update. Updates that pile up during a render are
/// collapsed to the newest, so an orbiting client never waits on stale poses.
async fn stream_session(state: AppState, mut socket: WebSocket, lossless: bool) {
    let enc = if lossless { Encoding::Png } else { Encoding::Jpeg };
    let mut seq: u64 = 0;
    while let Some(Ok(msg)) = socket.recv().await {
        let mut text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        while let Some(Some(Ok(Message::Text(t)))) = socket.recv().now_or_never() {
            text = t.to_string();
        }
        seq += 1;
        let result = async {
            let req = parse_request(text.as_bytes())?;
            let job = validate(state.model()?, req)?;
            render_job(&state, job, enc).await
        }
        .await;
        let sent = match result {
            Ok((bytes, millis)) => {
                let meta = json!({
                    "seq": seq,
                    "millis": millis,
                    "format": if lossless { "png" } else { "jpeg" },
                    "bytes": bytes.len(),
                });
                match socket.send(Message::Text(meta.to_string().into())).await {
                    Ok(()) => socket.send(Message::Binary(bytes.into())).await,
                    Err(e) => Err(e),
                }
            }
            Err(e) => {
                let mut body = e.body();
                body["seq"] = json!(seq);
                body["status"] = json!(e.status.as_u16());
                socket.send(Message::Text(body.to_string().into())).await
            }
        };
        if sent.is_err() {
            break;
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/render", post(render))
        .route("/styles/sample", get(sample_style))
        .route("/stream", get(stream))
        .route("/reload", post(reload))
        .with_state(state)
}

/// Binds, starts loading the model in the background, and serves until
/// the task is dropped. Returns the bound address.
pub async fn spawn(addr: &str, opts: ServeOptions) -> std::io::Result<(SocketAddr, AppState, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let state = AppState::new(opts);
    let loader = state.clone();
    tokio::spawn(async move {
        let _ = loader.load().await;
    });
    let app = router(state.clone());
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            log::error!("server stopped: {e}");
        }
    });
    Ok((local, state, handle))
}

pub fn serve_blocking(addr: &str, opts: ServeOptions) -> stylefield::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let (local, _state, handle) = spawn(addr, opts).await?;
        log::info!("listening on http://{local}");
        eprintln!("listening on http://{local}");
        handle.await.map_err(std::io::Error::other)?;
        Ok(())
    })
}
