//! HTTP inference service over a directory of trained checkpoints.
//!
//! Routes:
//! - `GET /v1/checkpoints` rescans the directory and lists loadable checkpoints.
//! - `POST /v1/synthesize` returns PNG bytes for images; volumes become jobs.
//! - `GET /v1/jobs/{id}` reports job status, `GET /v1/jobs/{id}/result` the bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Instant, SystemTime};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ipfn_core::checkpoint;
use ipfn_core::data::ExemplarKind;
use ipfn_core::model::FieldModel;
use ipfn_core::synth::{synthesize, GuidanceSpec, SynthesisRequest};
use serde::{Deserialize, Serialize};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub ckpt_dir: PathBuf,
    /// Largest accepted output size along any axis.
    pub max_dims: usize,
    /// Concurrent synthesis jobs; further requests get 503.
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            ckpt_dir: PathBuf::from("."),
            max_dims: 1024,
            workers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub id: String,
    pub kind: ExemplarKind,
    pub conditioning: String,
    pub iterations: u64,
    pub channels: usize,
    pub period_px: Vec<f64>,
}

struct Loaded {
    entry: CheckpointEntry,
    model: Arc<FieldModel>,
    stamp: (u64, Option<SystemTime>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    fn rank(self) -> u8 {
        match self {
            JobStatus::Queued => 0,
            JobStatus::Running => 1,
            JobStatus::Done | JobStatus::Failed => 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JobTimings {
    pub queued_ms: Option<u64>,
    pub run_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthJob {
    pub id: u64,
    pub checkpoint_id: String,
    pub request: SynthesisRequest,
    pub status: JobStatus,
    pub result_url: Option<String>,
    pub content_type: Option<String>,
    pub error: Option<String>,
    pub timings: JobTimings,
}

struct JobSlot {
    job: SynthJob,
    created: Instant,
    started: Option<Instant>,
    result: Option<Arc<Vec<u8>>>,
}

pub struct AppState {
    config: ServiceConfig,
    checkpoints: RwLock<BTreeMap<String, Arc<Loaded>>>,
    jobs: Mutex<HashMap<u64, JobSlot>>,
    next_job: AtomicU64,
    permits: Arc<Semaphore>,
}

impl AppState {
    /// Build the state and perform the initial directory scan.
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let state = Arc::new(Self {
            permits: Arc::new(Semaphore::new(config.workers.max(1))),
            config,
            checkpoints: RwLock::new(BTreeMap::new()),
            jobs: Mutex::new(HashMap::new()),
            next_job: AtomicU64::new(1),
        });
        state.rescan();
        state
    }

    /// Sync the checkpoint table with the directory. Unreadable or corrupt
    /// files are skipped with a warning.
    pub fn rescan(&self) {
        let dir = &self.config.ckpt_dir;
        let entries = match std::fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) => {
                tracing::warn!("cannot read checkpoint dir {}: {e}", dir.display());
                return;
            }
        };
        let mut seen = BTreeMap::new();
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("ipfn") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
                continue;
            };
            let meta = entry.metadata().ok();
            let stamp = (meta.as_ref().map_or(0, |m| m.len()), meta.and_then(|m| m.modified().ok()));
            let known = self.checkpoints.read().expect("checkpoint table").get(&id).cloned();
            match known {
                Some(l) if l.stamp == stamp => {
                    seen.insert(id, l);
                }
                _ => match load(&id, &path, stamp) {
                    Ok(l) => {
                        seen.insert(id, Arc::new(l));
                    }
                    Err(e) => tracing::warn!("skipping checkpoint {}: {e}", path.display()),
                },
            }
        }
        *self.checkpoints.write().expect("checkpoint table") = seen;
    }

    pub fn list(&self) -> Vec<CheckpointEntry> {
        let table = self.checkpoints.read().expect("checkpoint table");
        table.values().map(|l| l.entry.clone()).collect()
    }

    fn checkpoint(&self, id: &str) -> Option<Arc<Loaded>> {
        self.checkpoints.read().expect("checkpoint table").get(id).cloned()
    }

    /// Take one worker slot until the permit is dropped; `None` when all are busy.
    pub fn reserve_worker(&self) -> Option<OwnedSemaphorePermit> {
        self.permits.clone().try_acquire_owned().ok()
    }

    pub fn job(&self, id: u64) -> Option<SynthJob> {
        self.jobs.lock().expect("job table").get(&id).map(|s| s.job.clone())
    }

    fn advance(&self, id: u64, status: JobStatus, outcome: Option<Result<(Vec<u8>, &'static str), String>>) {
        let mut jobs = self.jobs.lock().expect("job table");
        let Some(slot) = jobs.get_mut(&id) else { return };
        if status.rank() <= slot.job.status.rank() {
            return;
        }
        let now = Instant::now();
        slot.job.status = status;
        match status {
            JobStatus::Running => {
                slot.started = Some(now);
                slot.job.timings.queued_ms = Some(now.duration_since(slot.created).as_millis() as u64);
            }
            JobStatus::Done | JobStatus::Failed => {
                let start = slot.started.unwrap_or(slot.created);
                slot.job.timings.run_ms = Some(now.duration_since(start).as_millis() as u64);
                match outcome {
                    Some(Ok((bytes, ct))) => {
                        slot.result = Some(Arc::new(bytes));
                        slot.job.content_type = Some(ct.to_string());
                        slot.job.result_url = Some(format!("/v1/jobs/{id}/result"));
                    }
                    Some(Err(msg)) => slot.job.error = Some(msg),
                    None => {}
                }
            }
            JobStatus::Queued => {}
        }
    }
}

fn load(id: &str, path: &Path, stamp: (u64, Option<SystemTime>)) -> ipfn_core::Result<Loaded> {
    let state = checkpoint::load(path)?;
    let model = state.model;
    let entry = CheckpointEntry {
        id: id.to_string(),
        kind: model.kind,
        conditioning: model.conditioning.name().to_string(),
        iterations: state.iteration,
        channels: model.channels,
        period_px: model.period_pixels(),
    };
    Ok(Loaded {
        entry,
        model: Arc::new(model),
        stamp,
    })
}

/// Guidance as a bare number or a full specification.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum GuidanceInput {
    Scalar(f64),
    Spec(GuidanceSpec),
}

fn default_extent() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthBody {
    pub checkpoint_id: String,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_extent")]
    pub latent_extent: f64,
    #[serde(default)]
    pub constant_latent: Option<Vec<f32>>,
    #[serde(default)]
    pub guidance: Option<GuidanceInput>,
    #[serde(default)]
    pub center_offset: Option<Vec<f64>>,
}

impl SynthBody {
    fn request(&self) -> SynthesisRequest {
        let mut r = SynthesisRequest::new(self.dims.clone(), self.seed);
        r.latent_extent_scale = self.latent_extent;
        r.constant_latent = self.constant_latent.clone();
        r.center_offset = self.center_offset.clone();
        r.guidance = self.guidance.clone().map(|g| match g {
            GuidanceInput::Scalar(value) => GuidanceSpec::Scalar { value },
            GuidanceInput::Spec(s) => s,
        });
        r
    }
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn bytes_response(bytes: Vec<u8>, content_type: &str) -> Response {
    let len = bytes.len();
    (
        StatusCode::OK,
        [(header::CONTENT_TYPE, content_type.to_string()), (header::CONTENT_LENGTH, len.to_string())],
        bytes,
    )
        .into_response()
}

fn render(model: &FieldModel, req: &SynthesisRequest) -> Result<(Vec<u8>, &'static str), String> {
    synthesize(model, req)
        .and_then(|out| out.encode())
        .map_err(|e| e.to_string())
}

async fn list_checkpoints(State(state): State<Arc<AppState>>) -> Response {
    let s = state.clone();
    if tokio::task::spawn_blocking(move || s.rescan()).await.is_err() {
        return error(StatusCode::INTERNAL_SERVER_ERROR, "checkpoint scan failed");
    }
    Json(state.list()).into_response()
}

async fn post_synthesize(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let body: SynthBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) if e.is_data() => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let Some(ckpt) = state.checkpoint(&body.checkpoint_id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown checkpoint {:?}", body.checkpoint_id));
    };
    let limit = state.config.max_dims;
    if body.dims.iter().any(|&d| d > limit) {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("dims {:?} exceed the server limit of {limit} per axis", body.dims),
        );
    }
    let request = body.request();
    if let Err(e) = request.validate(&ckpt.model) {
        return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string());
    }
    let Some(permit) = state.reserve_worker() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "all synthesis workers are busy");
    };
    match ckpt.model.kind {
        ExemplarKind::Image2d => {
            let model = ckpt.model.clone();
            let done = tokio::task::spawn_blocking(move || {
                let out = render(&model, &request);
                drop(permit);
                out
            })
            .await;
            match done {
                Ok(Ok((bytes, ct))) => bytes_response(bytes, ct),
                Ok(Err(msg)) => error(StatusCode::INTERNAL_SERVER_ERROR, msg),
                Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "synthesis task panicked"),
            }
        }
        ExemplarKind::Sdf3d => {
            let job = submit(&state, body.checkpoint_id.clone(), ckpt, request, permit);
            (StatusCode::ACCEPTED, Json(job)).into_response()
        }
    }
}

fn submit(state: &Arc<AppState>, checkpoint_id: String, ckpt: Arc<Loaded>, request: SynthesisRequest, permit: OwnedSemaphorePermit) -> SynthJob {
    let id = state.next_job.fetch_add(1, Ordering::Relaxed);
    let job = SynthJob {
        id,
        checkpoint_id,
        request: request.clone(),
        status: JobStatus::Queued,
        result_url: None,
        content_type: None,
        error: None,
        timings: JobTimings::default(),
    };
    state.jobs.lock().expect("job table").insert(
        id,
        JobSlot {
            job: job.clone(),
            created: Instant::now(),
            started: None,
            result: None,
        },
    );
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        state.advance(id, JobStatus::Running, None);
        let out = render(&ckpt.model, &request);
        let status = if out.is_ok() { JobStatus::Done } else { JobStatus::Failed };
        state.advance(id, status, Some(out));
        drop(permit);
    });
    job
}

async fn get_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> Response {
    match state.job(id) {
        Some(job) => Json(job).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown job {id}")),
    }
}

async fn get_job_result(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> Response {
    let jobs = state.jobs.lock().expect("job table");
    let Some(slot) = jobs.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown job {id}"));
    };
    match (&slot.result, slot.job.status) {
        (Some(bytes), JobStatus::Done) => {
            let ct = slot.job.content_type.as_deref().unwrap_or("application/octet-stream");
            bytes_response(bytes.as_ref().clone(), ct)
        }
        (_, JobStatus::Failed) => error(
            StatusCode::CONFLICT,
            format!("job {id} failed: {}", slot.job.error.clone().unwrap_or_default()),
        ),
        _ => error(StatusCode::CONFLICT, format!("job {id} has not finished")),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/checkpoints", get(list_checkpoints))
        .route("/v1/synthesize", post(post_synthesize))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/jobs/{id}/result", get(get_job_result))
        .with_state(state)
}

/// Bind `0.0.0.0:port` and serve until the process ends.
pub async fn serve(config: ServiceConfig, port: u16) -> std::io::Result<()> {
    let state = AppState::new(config);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
