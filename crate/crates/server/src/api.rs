//! The `/v1` HTTP and WebSocket service over persistent sessions.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

use dragsplat_core::camera::{project, CameraPose};
use dragsplat_core::config::PipelineConfig;
use dragsplat_core::diffusion::checkpoint::{decode_lora, encode_lora};
use dragsplat_core::gsplat::{encode_ply, parse_ply, GaussianCloud};
use dragsplat_core::render::{splat, RenderOptions};
use dragsplat_core::Error;

use crate::pipeline::{
    check_cameras, decode_views, default_cameras, drag, edited_images, encode_views, fit_lora, json_line, load_model,
    refit_to_views, Model, Picks,
};
use crate::session::{Event, Job, JobError, JobKind, JobState, Session, EVENTS_FILE};
use crate::store::ArtifactStore;

pub const PORT_ENV: &str = "DRAGSPLAT_PORT";
pub const DATA_DIR_ENV: &str = "DRAGSPLAT_DATA_DIR";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Sessions live in `<data_dir>/sessions/<id>`.
    pub data_dir: PathBuf,
    /// Pretrained network checkpoints.
    pub cache_dir: PathBuf,
    pub pipeline: PipelineConfig,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, code: code.to_string(), message: message.into() }
    }

    fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_payload", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) | Error::Checkpoint(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<io::Error> for ApiError {
    fn from(e: io::Error) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "IO", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct SessionSlot {
    dir: PathBuf,
    store: ArtifactStore,
    state: Mutex<Session>,
    events: Mutex<Vec<Event>>,
    tx: broadcast::Sender<Event>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl SessionSlot {
    fn new(dir: PathBuf, session: Session, events: Vec<Event>) -> io::Result<Self> {
        let store = ArtifactStore::open(dir.join("artifacts"))?;
        let (tx, _) = broadcast::channel(1024);
        Ok(SessionSlot { dir, store, state: Mutex::new(session), events: Mutex::new(events), tx })
    }

    /// Appends an event while the caller holds the session lock, so sequence
    /// numbers follow the order of state changes.
    fn emit(&self, session: &mut Session, kind: &str, job: Option<&str>, data: Value) {
        session.last_seq += 1;
        let event = Event { seq: session.last_seq, kind: kind.to_string(), job: job.map(str::to_string), data };
        let line = json_line(&event);
        let appended = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(EVENTS_FILE))
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(e) = appended {
            log::warn!("session {}: cannot append event: {e}", session.id);
        }
        lock(&self.events).push(event.clone());
        let _ = self.tx.send(event);
    }

    fn save(&self, session: &Session) -> ApiResult<()> {
        session.save(&self.dir)?;
        Ok(())
    }

    fn cloud(&self, session: &Session) -> ApiResult<GaussianCloud> {
        let name = session.cloud.as_ref().ok_or_else(|| ApiError::conflict("cloud_required", "upload a PLY first"))?;
        let mut cloud = parse_ply(&self.store.get(name)?)?;
        cloud.set_mask(&session.mask)?;
        Ok(cloud)
    }
}

pub struct App {
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
    model: Mutex<Option<Arc<Model>>>,
}

impl App {
    /// Opens the data directory and recovers every session found in it. Jobs
    /// that were running when the previous process stopped are marked failed.
    pub fn open(cfg: ServiceConfig) -> io::Result<Arc<App>> {
        cfg.pipeline.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        let root = cfg.data_dir.join("sessions");
        std::fs::create_dir_all(&root)?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(&root)? {
            let dir = entry?.path();
            if !dir.is_dir() {
                continue;
            }
            match recover(&dir) {
                Ok(slot) => {
                    let id = lock(&slot.state).id.clone();
                    sessions.insert(id, Arc::new(slot));
                }
                Err(e) => log::warn!("skipping session directory {}: {e}", dir.display()),
            }
        }
        log::info!("recovered {} sessions from {}", sessions.len(), root.display());
        Ok(Arc::new(App { cfg, sessions: Mutex::new(sessions), model: Mutex::new(None) }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    fn session(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        lock(&self.sessions).get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    /// The shared denoiser, loaded or pretrained on first use.
    fn model(&self) -> dragsplat_core::Result<Arc<Model>> {
        let mut slot = lock(&self.model);
        if let Some(m) = slot.as_ref() {
            return Ok(m.clone());
        }
        let m = Arc::new(load_model(&self.cfg.pipeline, &self.cfg.cache_dir)?);
        *slot = Some(m.clone());
        Ok(m)
    }
}

fn recover(dir: &FsPath) -> io::Result<SessionSlot> {
    let mut session = Session::load(dir)?;
    let mut events = Vec::new();
    if let Ok(text) = std::fs::read_to_string(dir.join(EVENTS_FILE)) {
        // a torn final line from a crash is dropped
        events.extend(text.lines().filter_map(|l| serde_json::from_str::<Event>(l).ok()));
    }
    session.last_seq = session.last_seq.max(events.last().map_or(0, |e| e.seq));
    let mut changed = false;
    for job in session.jobs.values_mut() {
        if job.is_active() {
            job.state = JobState::Failed;
            job.error = Some(JobError { code: "interrupted".into(), message: "the service stopped during this job".into() });
            changed = true;
        }
    }
    if changed {
        session.save(dir)?;
    }
    SessionSlot::new(dir.to_path_buf(), session, events)
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/v1/sessions", post(create_session).get(list_sessions))
        .route("/v1/sessions/{id}", get(get_status))
        .route("/v1/sessions/{id}/ply", put(upload_ply))
        .route("/v1/sessions/{id}/cameras", put(set_cameras))
        .route("/v1/sessions/{id}/views/{view}", get(render_view))
        .route("/v1/sessions/{id}/picks", put(set_picks))
        .route("/v1/sessions/{id}/mask", put(set_mask))
        .route("/v1/sessions/{id}/jobs/{kind}", post(start_job))
        .route("/v1/sessions/{id}/artifacts/{name}", get(get_artifact))
        .route("/v1/sessions/{id}/export", get(export_ply))
        .route("/v1/sessions/{id}/events", get(events))
        .with_state(app)
}

/// Serves until ctrl-c.
pub async fn serve(app: Arc<App>, addr: SocketAddr) -> io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(e.to_string()))
}

fn ensure_idle(session: &Session) -> ApiResult<()> {
    match session.active_job() {
        Some(kind) => Err(ApiError::conflict("job_running", format!("the {} job is still running", kind.name()))),
        None => Ok(()),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn create_session(State(app): State<Arc<App>>) -> ApiResult<Json<Value>> {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = app.cfg.data_dir.join("sessions").join(&id);
    std::fs::create_dir_all(&dir)?;
    let session = Session::new(id.clone());
    session.save(&dir)?;
    let slot = SessionSlot::new(dir, session, Vec::new())?;
    lock(&app.sessions).insert(id.clone(), Arc::new(slot));
    Ok(Json(json!({ "id": id })))
}

async fn list_sessions(State(app): State<Arc<App>>) -> Json<Value> {
    let mut ids: Vec<String> = lock(&app.sessions).keys().cloned().collect();
    ids.sort();
    Json(json!({ "sessions": ids }))
}

#[derive(Serialize)]
struct ViewProjection {
    handles: Vec<Option<[f64; 2]>>,
    targets: Vec<Option<[f64; 2]>>,
}

async fn get_status(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    let session = lock(&slot.state).clone();
    let mut status = serde_json::to_value(&session).map_err(|e| ApiError::from(Error::from(e)))?;
    if let (Some(cams), Some(picks)) = (&session.cameras, &session.picks) {
        let proj: Vec<ViewProjection> = cams
            .iter()
            .map(|c| ViewProjection {
                handles: project(&picks.starts, c).into_iter().map(|p| p.ok()).collect(),
                targets: project(&picks.ends, c).into_iter().map(|p| p.ok()).collect(),
            })
            .collect();
        status["projections"] = json!(proj);
    }
    Ok(Json(status))
}

async fn upload_ply(State(app): State<Arc<App>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    let cloud = parse_ply(&body)?;
    if cloud.is_empty() {
        return Err(ApiError::invalid("the PLY holds no gaussians"));
    }
    let cams = default_cameras(&cloud, &app.cfg.pipeline)?;
    let name = slot.store.put(&body, "ply")?;
    let mut s = lock(&slot.state);
    ensure_idle(&s)?;
    s.cloud = Some(name.clone());
    s.count = cloud.len();
    s.cameras = Some(cams);
    s.picks = None;
    s.mask.clear();
    s.reset(&JobKind::ALL);
    slot.save(&s)?;
    Ok(Json(json!({ "count": cloud.len(), "artifact": name })))
}

async fn set_cameras(State(app): State<Arc<App>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    let cams: Vec<CameraPose> = parse_json(&body)?;
    check_cameras(&cams)?;
    let mut s = lock(&slot.state);
    ensure_idle(&s)?;
    s.cameras = Some(cams);
    s.reset(&JobKind::ALL);
    slot.save(&s)?;
    Ok(Json(json!({ "count": 4 })))
}

#[derive(Deserialize)]
struct RenderQuery {
    splat_scale: Option<f64>,
    /// `original` (default) or `refit`.
    source: Option<String>,
}

async fn render_view(
    State(app): State<Arc<App>>,
    Path((id, view)): Path<(String, usize)>,
    Query(q): Query<RenderQuery>,
) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    let (mut cloud, cam) = {
        let s = lock(&slot.state);
        let cloud = match q.source.as_deref() {
            None | Some("original") => slot.cloud(&s)?,
            Some("refit") => {
                let job = s.job(JobKind::Refit);
                let name = job
                    .artifacts
                    .get("ply")
                    .filter(|_| job.is_done())
                    .ok_or_else(|| ApiError::conflict("refit_required", "no finished refit to render"))?;
                parse_ply(&slot.store.get(name)?)?
            }
            Some(other) => return Err(ApiError::invalid(format!("unknown render source {other}"))),
        };
        let cams = s.cameras.as_ref().ok_or_else(|| ApiError::conflict("cameras_required", "set cameras first"))?;
        let cam = cams.get(view).cloned().ok_or_else(|| ApiError::not_found(format!("no view {view}")))?;
        (cloud, cam)
    };
    let mut options = app.cfg.pipeline.render;
    if let Some(scale) = q.splat_scale {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(ApiError::invalid("splat_scale must be a finite non-negative number"));
        }
        options = RenderOptions { splat_scale: scale, ..options };
    }
    let png = blocking(move || {
        cloud.clear_mask();
        Ok(splat(&cloud, &cam, options)?.to_png()?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn set_picks(State(app): State<Arc<App>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    let picks: Picks = parse_json(&body)?;
    let pick = picks.point_pick()?;
    let mut s = lock(&slot.state);
    ensure_idle(&s)?;
    let mut cloud = slot.cloud(&s)?;
    pick.validate_against(&cloud)?;
    if let Some(mask) = &picks.mask {
        cloud.set_mask(mask)?;
        s.mask = cloud.mask_indices();
    }
    s.picks = Some(pick);
    s.reset(JobKind::Lora.downstream());
    slot.save(&s)?;
    Ok(Json(json!({ "count": picks.starts.len(), "mask": s.mask.len() })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskBody {
    indices: Vec<usize>,
}

async fn set_mask(State(app): State<Arc<App>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    let mask: MaskBody = parse_json(&body)?;
    let mut s = lock(&slot.state);
    ensure_idle(&s)?;
    let mut cloud = slot.cloud(&s)?;
    cloud.set_mask(&mask.indices)?;
    s.mask = cloud.mask_indices();
    s.reset(JobKind::Lora.downstream());
    slot.save(&s)?;
    Ok(Json(json!({ "count": s.mask.len() })))
}

/// The service config with the job's section overridden by the keys of a
/// JSON object body.
fn job_config(base: &PipelineConfig, kind: JobKind, body: &[u8]) -> ApiResult<PipelineConfig> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(base.clone());
    }
    let overrides: Value = parse_json(body)?;
    let Value::Object(overrides) = overrides else {
        return Err(ApiError::invalid("job options must be a JSON object"));
    };
    let mut full = serde_json::to_value(base).map_err(|e| ApiError::from(Error::from(e)))?;
    let section = full
        .get_mut(kind.name())
        .and_then(Value::as_object_mut)
        .ok_or_else(|| ApiError::invalid(format!("no options for {}", kind.name())))?;
    for (k, v) in overrides {
        section.insert(k, v);
    }
    let cfg: PipelineConfig = serde_json::from_value(full).map_err(|e| ApiError::invalid(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Everything a job reads, captured when it starts.
struct JobInputs {
    cloud: GaussianCloud,
    cams: Vec<CameraPose>,
    picks: Option<dragsplat_core::camera::PointPick>,
    lora: Option<String>,
    edited: Option<String>,
}

async fn start_job(
    State(app): State<Arc<App>>,
    Path((id, kind)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    let kind = match kind.as_str() {
        "lora" => JobKind::Lora,
        "drag" => JobKind::Drag,
        "refit" => JobKind::Refit,
        _ => return Err(ApiError::not_found(format!("no job kind {kind}"))),
    };
    let cfg = job_config(&app.cfg.pipeline, kind, &body)?;
    let job_id = uuid::Uuid::new_v4().simple().to_string();
    let inputs = {
        let mut s = lock(&slot.state);
        ensure_idle(&s)?;
        let cloud = slot.cloud(&s)?;
        let cams = s.cameras.clone().ok_or_else(|| ApiError::conflict("cameras_required", "set cameras first"))?;
        match kind {
            JobKind::Lora => {}
            JobKind::Drag => {
                if !s.job(JobKind::Lora).is_done() {
                    return Err(ApiError::conflict("lora_required", "run the lora job before dragging"));
                }
                if s.picks.is_none() {
                    return Err(ApiError::conflict("picks_required", "set start and end points before dragging"));
                }
            }
            JobKind::Refit => {
                if !s.job(JobKind::Drag).is_done() {
                    return Err(ApiError::conflict("drag_required", "run the drag job before refitting"));
                }
                if s.mask.is_empty() {
                    return Err(ApiError::conflict("mask_required", "the gaussian mask is empty"));
                }
            }
        }
        let inputs = JobInputs {
            cloud,
            cams,
            picks: s.picks.clone(),
            lora: s.job(JobKind::Lora).artifacts.get("lora").cloned(),
            edited: s.job(JobKind::Drag).artifacts.get("edited").cloned(),
        };
        s.reset(kind.downstream());
        *s.job_mut(kind) = Job { id: Some(job_id.clone()), ..Job::default() };
        slot.emit(&mut s, "state", Some(&job_id), json!({ "kind": kind.name(), "state": JobState::Pending }));
        s.job_mut(kind).advance(JobState::Running).map_err(ApiError::invalid)?;
        slot.emit(&mut s, "state", Some(&job_id), json!({ "kind": kind.name(), "state": JobState::Running }));
        slot.save(&s)?;
        inputs
    };
    let (app2, slot2, jid) = (app.clone(), slot.clone(), job_id.clone());
    tokio::task::spawn_blocking(move || finish_job(&app2, &slot2, kind, &jid, &cfg, inputs));
    Ok(Json(json!({ "job_id": job_id, "kind": kind.name() })))
}

type JobOutput = (BTreeMap<String, String>, Value);

fn finish_job(app: &App, slot: &SessionSlot, kind: JobKind, job_id: &str, cfg: &PipelineConfig, inputs: JobInputs) {
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| execute(app, slot, kind, job_id, cfg, inputs)))
        .unwrap_or_else(|_| Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "the job panicked")));
    let mut s = lock(&slot.state);
    if s.job(kind).id.as_deref() != Some(job_id) {
        return;
    }
    let job = s.job_mut(kind);
    let state = match result {
        Ok((artifacts, summary)) => {
            job.artifacts = artifacts;
            job.summary = Some(summary);
            JobState::Done
        }
        Err(e) => {
            log::warn!("{} job {job_id} failed: {}", kind.name(), e.message);
            job.error = Some(JobError { code: e.code, message: e.message });
            JobState::Failed
        }
    };
    if let Err(e) = job.advance(state) {
        log::error!("{e}");
    }
    slot.emit(&mut s, "state", Some(job_id), json!({ "kind": kind.name(), "state": state }));
    if let Err(e) = slot.save(&s) {
        log::error!("cannot save session {}: {}", s.id, e.message);
    }
}

/// Streams one loop record and updates the job's progress.
fn report(slot: &SessionSlot, kind: JobKind, job_id: &str, progress: f64, record: &impl Serialize) {
    let data = serde_json::to_value(record).unwrap_or(Value::Null);
    let mut s = lock(&slot.state);
    s.job_mut(kind).progress = progress.clamp(0.0, 1.0);
    slot.emit(&mut s, kind.name(), Some(job_id), data);
}

fn execute(app: &App, slot: &SessionSlot, kind: JobKind, job_id: &str, cfg: &PipelineConfig, inputs: JobInputs) -> ApiResult<JobOutput> {
    let JobInputs { cloud, cams, picks, lora, edited } = inputs;
    let mut artifacts = BTreeMap::new();
    let mut telemetry = String::new();
    let summary = match kind {
        JobKind::Lora => {
            let model = app.model()?;
            let steps = cfg.lora.steps.max(1) as f64;
            let r = fit_lora(&model, &cloud, &cams, cfg, |step| {
                telemetry.push_str(&json_line(step));
                report(slot, kind, job_id, (step.step + 1) as f64 / steps, step);
            })?;
            artifacts.insert("lora".into(), slot.store.put(&encode_lora(&r.lora, model.net.config())?, "ckpt")?);
            json!({ "steps": r.losses.len(), "final_loss": r.losses.last() })
        }
        JobKind::Drag => {
            let model = app.model()?;
            let name = lora.ok_or_else(|| ApiError::conflict("lora_required", "no adapters"))?;
            let (adapters, _) = decode_lora(&slot.store.get(&name)?)?;
            let picks = picks.ok_or_else(|| ApiError::conflict("picks_required", "no picks"))?;
            let iters = cfg.drag.max_iters.max(1) as f64;
            let out = drag(&model, Some(&adapters), &cloud, &cams, &picks, cfg, |rec| {
                telemetry.push_str(&json_line(rec));
                report(slot, kind, job_id, rec.iter as f64 / iters, rec);
            })?;
            artifacts.insert("edited".into(), slot.store.put(&encode_views(&out.edited), "json")?);
            for (v, img) in edited_images(&out.edited)?.iter().enumerate() {
                artifacts.insert(format!("view_{v}"), slot.store.put(&img.to_png(None)?, "png")?);
            }
            json!({
                "iterations": out.telemetry.len(),
                "converged": out.converged,
                "initial_distance": out.initial_distance,
                "final_distance": out.final_distance,
            })
        }
        JobKind::Refit => {
            let name = edited.ok_or_else(|| ApiError::conflict("drag_required", "no edited views"))?;
            let views = decode_views(&slot.store.get(&name)?)?;
            let iters = cfg.refit.iterations as f64;
            let r = refit_to_views(&cloud, &views, &cams, cfg, |rec| {
                telemetry.push_str(&json_line(rec));
                report(slot, kind, job_id, (rec.iter + 1) as f64 / iters, rec);
            })?;
            artifacts.insert("ply".into(), slot.store.put(&encode_ply(&r.cloud), "ply")?);
            let mut plain = r.cloud.clone();
            plain.clear_mask();
            for (v, cam) in cams.iter().enumerate() {
                let png = splat(&plain, cam, cfg.render)?.to_png()?;
                artifacts.insert(format!("view_{v}"), slot.store.put(&png, "png")?);
            }
            json!({ "iterations": r.losses.len(), "initial_loss": r.losses.first(), "final_loss": r.losses.last() })
        }
    };
    artifacts.insert("telemetry".into(), slot.store.put(telemetry.as_bytes(), "jsonl")?);
    Ok((artifacts, summary))
}

async fn get_artifact(State(app): State<Arc<App>>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    let path = slot.store.path(&name).ok_or_else(|| ApiError::not_found(format!("no artifact {name}")))?;
    let bytes = blocking(move || Ok(std::fs::read(path)?)).await?;
    let mime = match name.rsplit('.').next() {
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("jsonl") => "application/x-ndjson",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// The refit cloud when a refit has finished, the uploaded cloud otherwise.
async fn export_ply(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    let name = {
        let s = lock(&slot.state);
        let refit = s.job(JobKind::Refit);
        match refit.artifacts.get("ply").filter(|_| refit.is_done()) {
            Some(n) => n.clone(),
            None => s.cloud.clone().ok_or_else(|| ApiError::conflict("cloud_required", "upload a PLY first"))?,
        }
    };
    let bytes = slot.store.get(&name)?;
    Ok((
        [(header::CONTENT_TYPE, "application/octet-stream"), (header::CONTENT_DISPOSITION, "attachment; filename=\"scene.ply\"")],
        bytes,
    )
        .into_response())
}

#[derive(Deserialize)]
struct EventsQuery {
    /// Last sequence number the client has seen.
    since: Option<u64>,
}

async fn events(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    Ok(ws.on_upgrade(move |socket| stream_events(socket, slot, q.since.unwrap_or(0))))
}

async fn send_event(socket: &mut WebSocket, e: &Event) -> bool {
    let text = serde_json::to_string(e).expect("event serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

/// Replays events after `since`, then follows live ones. A subscriber that
/// falls behind the broadcast buffer catches up from the backlog.
async fn stream_events(mut socket: WebSocket, slot: Arc<SessionSlot>, since: u64) {
    let mut rx = slot.tx.subscribe();
    let mut last = since;
    loop {
        let backlog: Vec<Event> = lock(&slot.events).iter().filter(|e| e.seq > last).cloned().collect();
        for e in &backlog {
            if !send_event(&mut socket, e).await {
                return;
            }
            last = e.seq;
        }
        loop {
            tokio::select! {
                msg = rx.recv() => match msg {
                    Ok(e) => {
                        if e.seq > last {
                            if !send_event(&mut socket, &e).await {
                                return;
                            }
                            last = e.seq;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => break,
                    Err(broadcast::error::RecvError::Closed) => return,
                },
                incoming = socket.recv() => match incoming {
                    None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                    Some(Ok(_)) => {}
                },
            }
        }
    }
}
