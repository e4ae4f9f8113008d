//! HTTP API under `/v1`.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/v1/projects` | create, body `{"id"?, "seed"?}` |
//! | GET | `/v1/projects/{id}` | project state |
//! | PUT | `/v1/projects/{id}/video` | upload, body `{"fps", "frames": [base64 png]}` |
//! | POST | `/v1/projects/{id}/preprocess` | body `{"kps", "max_side"?}` |
//! | POST | `/v1/projects/{id}/train-lora` | async job, body [`RunConfig`] |
//! | PUT | `/v1/projects/{id}/instruction` | body [`DragInstruction`] |
//! | POST | `/v1/projects/{id}/propagate` | returns preview overlay frames |
//! | POST | `/v1/projects/{id}/run` | async job, body [`RunConfig`] |
//! | GET | `/v1/jobs/{job}` | job status |
//! | GET | `/v1/projects/{id}/result` | edited frames |
//! | GET | `/v1/projects/{id}/report` | `report.csv` |
//!
//! Failures answer with `{"code", "stage", "message"}`. Jobs are keyed by
//! project, stage and configuration hash, so resubmitting an identical request
//! returns the existing job. A project runs at most one mutating request at a
//! time; reads are never blocked.

use std::collections::{HashMap, HashSet};
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::codec::{read_frames, write_frames, VideoFrames};
use crate::error::{Error, Result};
use crate::instruction::{render_overlay, DragInstruction};
use crate::pipeline::preprocess::read_png_dir;
use crate::pipeline::{ErrorEnvelope, Models, Project, RunConfig, RunControl};
use crate::util::config_hash;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_root: PathBuf,
    pub workers: usize,
}

impl ServiceConfig {
    /// Reads `DRAGVIDEO_DATA_ROOT` (default `./data`) and `DRAGVIDEO_WORKERS` (default 1).
    pub fn from_env() -> Self {
        Self {
            data_root: std::env::var("DRAGVIDEO_DATA_ROOT")
                .map(PathBuf::from)
                .unwrap_or_else(|_| PathBuf::from("data")),
            workers: std::env::var("DRAGVIDEO_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
                .filter(|&n| n > 0)
                .unwrap_or(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub project: String,
    pub stage: String,
    pub config_hash: String,
    pub status: JobStatus,
    pub error: Option<ErrorEnvelope>,
}

type ModelFactory = Arc<dyn Fn() -> Models + Send + Sync>;

struct Inner {
    config: ServiceConfig,
    jobs: Mutex<HashMap<String, Job>>,
    busy: Mutex<HashSet<String>>,
    workers: Semaphore,
    models: ModelFactory,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self::with_models(config, Arc::new(Models::from_env))
    }

    pub fn with_models(config: ServiceConfig, models: ModelFactory) -> Self {
        let workers = Semaphore::new(config.workers.max(1));
        Self(Arc::new(Inner {
            config,
            jobs: Mutex::new(HashMap::new()),
            busy: Mutex::new(HashSet::new()),
            workers,
            models,
        }))
    }

    fn project_root(&self, id: &str) -> Result<PathBuf> {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !ok {
            return Err(Error::Config(format!("invalid project id {id:?}")));
        }
        Ok(self.0.config.data_root.join(id))
    }

    fn open(&self, id: &str) -> Result<Project> {
        Project::open(&self.project_root(id)?)
    }

    /// Marks `id` busy for the life of the returned guard.
    fn claim(&self, id: &str) -> Result<BusyGuard> {
        if !self.0.busy.lock().insert(id.to_string()) {
            return Err(Error::Busy(format!("project {id} is running another mutating request")));
        }
        Ok(BusyGuard {
            state: self.clone(),
            id: id.to_string(),
        })
    }
}

struct BusyGuard {
    state: AppState,
    id: String,
}

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.state.0.busy.lock().remove(&self.id);
    }
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

pub fn http_status(e: &Error) -> StatusCode {
    match e.code() {
        "ordering" | "busy" | "cancelled" => StatusCode::CONFLICT,
        "not_found" => StatusCode::NOT_FOUND,
        "config" | "domain" | "structural" | "instruction" | "json" | "image" => StatusCode::BAD_REQUEST,
        "remote" => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (http_status(&self.0), Json(ErrorEnvelope::from(&self.0))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Error::Config(format!("worker panicked: {e}")))?
}

fn encode_png_frames(video: &VideoFrames) -> Result<Vec<String>> {
    (0..video.frames())
        .map(|i| {
            let mut buf = Cursor::new(Vec::new());
            video.frame_image(i).write_to(&mut buf, image::ImageFormat::Png)?;
            Ok(B64.encode(buf.into_inner()))
        })
        .collect()
}

/// Parses a JSON body; an empty body yields `T::default()` when `default` is given.
fn parse<T: DeserializeOwned>(bytes: &Bytes, default: Option<T>) -> Result<T> {
    match default {
        Some(d) if bytes.iter().all(u8::is_ascii_whitespace) => Ok(d),
        _ => Ok(serde_json::from_slice(bytes)?),
    }
}

#[derive(Default, Deserialize)]
struct CreateBody {
    id: Option<String>,
    #[serde(default)]
    seed: u64,
}

async fn create_project(State(app): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let body: CreateBody = parse(&body, Some(CreateBody::default()))?;
    let id = body.id.unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    let root = app.project_root(&id)?;
    let state = blocking(move || Project::create(&root, body.seed).map(|p| p.state)).await?;
    Ok((StatusCode::CREATED, Json(state)))
}

async fn get_project(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(app.open(&id)?.state))
}

#[derive(Deserialize)]
struct VideoBody {
    fps: f64,
    frames: Vec<String>,
}

async fn upload_video(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let body: VideoBody = parse(&body, None)?;
    let project = app.open(&id)?;
    let guard = app.claim(&id)?;
    let count = blocking(move || {
        let _guard = guard;
        let mut data = Vec::new();
        let mut size = None;
        for (i, frame) in body.frames.iter().enumerate() {
            let bytes = B64
                .decode(frame)
                .map_err(|e| Error::Config(format!("frame {i} is not base64: {e}")))?;
            let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8();
            if *size.get_or_insert(img.dimensions()) != img.dimensions() {
                return Err(Error::Structural(format!("frame {i} differs in size from frame 0")));
            }
            data.extend_from_slice(img.as_raw());
        }
        let (w, h) = size.ok_or_else(|| Error::Domain("the upload holds no frames".into()))?;
        let video = VideoFrames::new(data, body.frames.len(), h as usize, w as usize, body.fps)?;
        let dir = project.path("source");
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_frames(&dir, &video)?;
        let meta = project.path("source.json");
        std::fs::write(&meta, serde_json::to_vec(&json!({"fps": body.fps}))?).map_err(|e| Error::io(&meta, e))?;
        Ok(video.frames())
    })
    .await?;
    Ok(Json(json!({"frames": count})))
}

fn source_fps(dir: &Path) -> Result<f64> {
    let path = dir.join("source.json");
    let text = std::fs::read_to_string(&path).map_err(|_| Error::Ordering {
        stage: "preprocess".into(),
        message: "no video has been uploaded".into(),
    })?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    v["fps"]
        .as_f64()
        .ok_or_else(|| Error::Structural("source.json lacks fps".into()))
}

#[derive(Deserialize)]
struct PreprocessBody {
    kps: f64,
    max_side: Option<usize>,
}

async fn preprocess(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let body: PreprocessBody = parse(&body, None)?;
    let mut project = app.open(&id)?;
    let guard = app.claim(&id)?;
    let state = blocking(move || {
        let _guard = guard;
        let fps = source_fps(project.root())?;
        let source = read_png_dir(&project.path("source"), fps)?;
        project.preprocess(&source, body.kps, "upload", body.max_side)?;
        Ok(project.state)
    })
    .await?;
    Ok(Json(state))
}

async fn set_instruction(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let body: DragInstruction = parse(&body, None)?;
    let mut project = app.open(&id)?;
    let guard = app.claim(&id)?;
    let state = blocking(move || {
        let _guard = guard;
        project.set_instruction(&body)?;
        Ok(project.state)
    })
    .await?;
    Ok(Json(state))
}

async fn propagate(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let mut project = app.open(&id)?;
    let guard = app.claim(&id)?;
    let models = app.0.models.clone();
    let body = blocking(move || {
        let _guard = guard;
        let propagated = project.propagate(&models())?;
        let overlay = render_overlay(&project.video()?, &propagated)?;
        Ok(json!({
            "handles": propagated.handles,
            "targets": propagated.targets,
            "overlay": encode_png_frames(&overlay)?,
        }))
    })
    .await?;
    Ok(Json(body))
}

#[derive(Clone, Copy, PartialEq)]
enum JobKind {
    TrainLora,
    Run,
}

impl JobKind {
    fn name(self) -> &'static str {
        match self {
            JobKind::TrainLora => "train_lora",
            JobKind::Run => "run",
        }
    }
}

async fn submit(app: AppState, id: String, kind: JobKind, cfg: RunConfig) -> ApiResult<Response> {
    cfg.validate()?;
    let project = app.open(&id)?;
    let hash = config_hash(&cfg)?;
    let job_id = config_hash(&(&id, kind.name(), &hash))?[..24].to_string();
    if let Some(job) = app.0.jobs.lock().get(&job_id) {
        if job.status != JobStatus::Failed {
            return Ok((StatusCode::ACCEPTED, Json(job.clone())).into_response());
        }
    }
    if kind == JobKind::Run && project.propagated().is_err() {
        return Err(Error::Ordering {
            stage: "run".into(),
            message: "the instruction has not been propagated".into(),
        }
        .into());
    }
    let guard = app.claim(&id)?;
    let job = Job {
        id: job_id.clone(),
        project: id.clone(),
        stage: kind.name().into(),
        config_hash: hash,
        status: JobStatus::Queued,
        error: None,
    };
    app.0.jobs.lock().insert(job_id.clone(), job.clone());
    let worker = app.clone();
    tokio::spawn(async move {
        let _guard = guard;
        let Ok(_permit) = worker.0.workers.acquire().await else {
            return;
        };
        set_job(&worker, &job_id, JobStatus::Running, None);
        let models = worker.0.models.clone();
        let root = match worker.project_root(&id) {
            Ok(r) => r,
            Err(e) => return set_job(&worker, &job_id, JobStatus::Failed, Some(&e)),
        };
        let outcome = blocking(move || {
            let mut project = Project::open(&root)?;
            match kind {
                JobKind::TrainLora => project.train_lora(&cfg, &RunControl::default()).map(|_| ()),
                JobKind::Run => project.run(&cfg, &models(), &RunControl::default()).map(|_| ()),
            }
        })
        .await;
        match outcome {
            Ok(()) => set_job(&worker, &job_id, JobStatus::Succeeded, None),
            Err(e) => set_job(&worker, &job_id, JobStatus::Failed, Some(&e)),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

fn set_job(app: &AppState, id: &str, status: JobStatus, error: Option<&Error>) {
    if let Some(job) = app.0.jobs.lock().get_mut(id) {
        job.status = status;
        job.error = error.map(ErrorEnvelope::from);
    }
}

async fn train_lora(State(app): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    submit(app, id, JobKind::TrainLora, parse(&body, Some(RunConfig::default()))?).await
}

async fn run(State(app): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    submit(app, id, JobKind::Run, parse(&body, Some(RunConfig::default()))?).await
}

async fn get_job(State(app): State<AppState>, UrlPath(job): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let job = app.0.jobs.lock().get(&job).cloned();
    job.map(Json)
        .ok_or_else(|| Error::NotFound("no such job".into()).into())
}

async fn get_result(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let project = app.open(&id)?;
    let dir = project.path("result/edited");
    if !dir.exists() {
        return Err(Error::NotFound(format!("project {id} has no result yet")).into());
    }
    let fps = project.state.kps.unwrap_or(8.0);
    let frames = blocking(move || encode_png_frames(&read_frames(&dir, fps)?)).await?;
    Ok(Json(json!({"fps": fps, "frames": frames})))
}

async fn get_report(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let path = app.open(&id)?.path("report.csv");
    let text =
        std::fs::read_to_string(&path).map_err(|_| Error::NotFound(format!("project {id} has no report yet")))?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], text))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/projects", post(create_project))
        .route("/v1/projects/{id}", get(get_project))
        .route("/v1/projects/{id}/video", put(upload_video))
        .route("/v1/projects/{id}/preprocess", post(preprocess))
        .route("/v1/projects/{id}/train-lora", post(train_lora))
        .route("/v1/projects/{id}/instruction", put(set_instruction))
        .route("/v1/projects/{id}/propagate", post(propagate))
        .route("/v1/projects/{id}/run", post(run))
        .route("/v1/projects/{id}/result", get(get_result))
        .route("/v1/projects/{id}/report", get(get_report))
        .route("/v1/jobs/{job}", get(get_job))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> Result<()> {
    std::fs::create_dir_all(&config.data_root).map_err(|e| Error::io(&config.data_root, e))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(Path::new(&addr.to_string()), e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(AppState::new(config)))
        .await
        .map_err(|e| Error::io(Path::new(&addr.to_string()), e))
}
