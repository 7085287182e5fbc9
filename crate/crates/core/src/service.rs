//! HTTP facade over sessions.
//!
//! | method | path                          | purpose                                   |
//! |--------|-------------------------------|-------------------------------------------|
//! | POST   | `/sessions`                   | multipart `sketch` (PNG) + `config` (JSON) |
//! | GET    | `/sessions?phase=`            | summaries, newest first                   |
//! | GET    | `/sessions/{id}`              | state                                     |
//! | POST   | `/sessions/{id}/run?steps=k`  | run; k > 1 runs in the background (202)   |
//! | GET    | `/sessions/{id}/steps/{n}`    | one step with base64 PNG renders          |
//! | POST   | `/sessions/{id}/override`     | human action                              |
//! | GET    | `/sessions/{id}/export.svg`   | current diagram as SVG                    |
//! | GET    | `/sessions/{id}/events`       | trace records as server-sent events       |
//!
//! Errors are `{"code": ..., "message": ...}` with 4xx for bad input, 409
//! for conflicting writes, 502 for model backend failures and 500 otherwise.

use std::collections::HashMap;
use std::convert::Infallible;
use std::io::{Read, Seek, SeekFrom};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::{Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{build_gateway, embedded_target, AppConfig, BackendInputs, BackendKind, ConfigError};
use crate::engine::{EngineError, LoopState, Override, Phase, Session, SessionConfig, StepRecord};
use crate::gateway::{GatewayError, ModelGateway};
use crate::grammar::{diagram_from_value, diagram_to_value, Canvas, Diagram};
use crate::render::{compile_svg, decode_png, encode_png, render_diagram};
use crate::replay::restore_session;
use crate::store::{SessionStore, StoreError};
use crate::trace::TraceRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let msg = e.to_string();
        match e {
            EngineError::InvalidConfig(_) => Self::bad_request("invalid_config", msg),
            EngineError::InvalidSketch(_) => Self::bad_request("invalid_image", msg),
            EngineError::InvalidOverride(_) => Self::bad_request("invalid_override", msg),
            EngineError::InvalidPhase { .. } => Self::conflict("invalid_phase", msg),
            EngineError::InitialProgramInvalid(_) => Self::new(StatusCode::BAD_GATEWAY, "initial_program_invalid", msg),
            EngineError::Gateway(GatewayError::Image(_)) => Self::internal(msg),
            EngineError::Gateway(_) => Self::new(StatusCode::BAD_GATEWAY, "backend_failure", msg),
            EngineError::Trace(_) => Self::internal(msg),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownSession(id) => Self::not_found(format!("unknown session {id}")),
            other => Self::internal(other.to_string()),
        }
    }
}

/// One live session plus what readers may see without blocking on a run.
struct Slot {
    session: Mutex<Session>,
    snapshot: RwLock<LoopState>,
    running: AtomicBool,
    last_error: RwLock<Option<String>>,
}

impl Slot {
    fn new(session: Session) -> Self {
        let snapshot = RwLock::new(session.state().clone());
        Self {
            session: Mutex::new(session),
            snapshot,
            running: AtomicBool::new(false),
            last_error: RwLock::new(None),
        }
    }

    fn snapshot(&self) -> LoopState {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn publish(&self, session: &Session) {
        *self.snapshot.write().expect("snapshot lock") = session.state().clone();
    }

    /// Claims the single-writer flag.
    fn claim(self: &Arc<Self>) -> Result<RunGuard, ApiError> {
        self.running
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| RunGuard(self.clone()))
            .map_err(|_| ApiError::conflict("run_in_progress", "a run is already in progress for this session"))
    }
}

struct RunGuard(Arc<Slot>);

impl Drop for RunGuard {
    fn drop(&mut self) {
        self.0.running.store(false, Ordering::Release);
    }
}

/// Builds the model gateway for a new or restored session.
pub type GatewayFactory = Arc<dyn Fn(BackendKind, BackendInputs) -> Result<ModelGateway, ConfigError> + Send + Sync>;

pub struct AppState {
    pub config: AppConfig,
    gateways: GatewayFactory,
    pub store: Arc<SessionStore>,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
    /// Poll interval of the event stream.
    pub event_poll: Duration,
}

impl AppState {
    pub fn new(config: AppConfig) -> Result<Arc<Self>, StoreError> {
        let c = config.clone();
        Self::with_gateway_factory(config, Arc::new(move |kind, inputs| build_gateway(kind, &c, inputs)))
    }

    /// Like [`AppState::new`] with custom model backends.
    pub fn with_gateway_factory(config: AppConfig, gateways: GatewayFactory) -> Result<Arc<Self>, StoreError> {
        let store = Arc::new(SessionStore::open(&config.store_root)?);
        Ok(Arc::new(Self {
            config,
            gateways,
            store,
            slots: Mutex::new(HashMap::new()),
            event_poll: Duration::from_millis(100),
        }))
    }

    fn slot(&self, id: &str) -> Option<Arc<Slot>> {
        self.slots.lock().expect("slot map").get(id).cloned()
    }

    /// Live slot, restoring it from the store after a restart.
    fn slot_or_restore(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        if let Some(s) = self.slot(id) {
            return Ok(s);
        }
        let trace = self.store.load_trace(id)?;
        let meta = trace.meta().map_err(|e| ApiError::internal(e.to_string()))?;
        let mut session = restore_session(&trace).map_err(|e| {
            ApiError::conflict("session_not_restorable", format!("session {id} cannot be resumed: {e}"))
        })?;
        let png = self.store.sketch_png(id)?;
        let decoded = decode_png(&png).map_err(|e| ApiError::internal(e.to_string()))?;
        let backend: BackendKind = meta.backend.parse().map_err(|e: String| ApiError::internal(e))?;
        let target = embedded_target(&decoded).and_then(Result::ok);
        let inputs = BackendInputs {
            target,
            script: (backend == BackendKind::Scripted).then(|| trace.clone()),
        };
        let gateway = (self.gateways)(backend, inputs)
            .map_err(|e| ApiError::conflict("session_not_restorable", e.to_string()))?;
        session.rebind(gateway, Arc::new(self.store.sink(id)), Some(decoded.image));
        let slot = Arc::new(Slot::new(session));
        self.slots
            .lock()
            .expect("slot map")
            .entry(id.to_string())
            .or_insert(slot.clone());
        Ok(self.slot(id).unwrap_or(slot))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/run", post(run_session))
        .route("/sessions/{id}/steps/{n}", get(get_step))
        .route("/sessions/{id}/override", post(override_session))
        .route("/sessions/{id}/export.svg", get(export_svg))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(config: AppConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    let state = AppState::new(config)?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CanvasSpec {
    Text(String),
    Object(Canvas),
}

/// The `config` part of a create request; everything is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateConfig {
    canvas: Option<CanvasSpec>,
    instruction: Option<String>,
    max_steps: Option<u32>,
    candidate_count: Option<usize>,
    equivalence_threshold: Option<f64>,
    max_consecutive_reverts: Option<u32>,
    max_in_flight: Option<usize>,
    review: Option<bool>,
    backend: Option<BackendKind>,
    /// Target diagram for the oracle backend.
    target: Option<Value>,
}

fn diagram_json(d: &Diagram) -> Value {
    diagram_to_value(d)
}

fn state_json(id: &str, s: &LoopState, config: &SessionConfig, running: bool, last_error: Option<String>) -> Value {
    json!({
        "id": id,
        "phase": s.phase,
        "step_count": s.step_count,
        "consecutive_reverts": s.consecutive_reverts,
        "instruction": s.instruction,
        "config": config,
        "current": diagram_json(&s.current),
        "initial": diagram_json(&s.initial),
        "failures": s.failures,
        "running": running,
        "last_error": last_error,
        "steps": s.history.iter().map(step_summary).collect::<Vec<_>>(),
    })
}

fn step_summary(r: &StepRecord) -> Value {
    json!({
        "index": r.index,
        "outcome": r.outcome,
        "selected": r.verdict.as_ref().map(|v| v.selected),
        "discrepancies": r.critique.discrepancies,
        "candidates": r.candidates.len(),
    })
}

fn png_base64(d: &Diagram, supersample: u32) -> Result<String, ApiError> {
    let img = render_diagram(d, supersample).map_err(|e| ApiError::internal(e.to_string()))?;
    let png = encode_png(&img).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    mut multipart: Multipart,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let mut sketch: Option<Vec<u8>> = None;
    let mut config = CreateConfig::default();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request("invalid_request", e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request("invalid_request", e.to_string()))?;
        match name.as_str() {
            "sketch" => sketch = Some(bytes.to_vec()),
            "config" => {
                config = serde_json::from_slice(&bytes)
                    .map_err(|e| ApiError::bad_request("invalid_config", e.to_string()))?
            }
            other => {
                return Err(ApiError::bad_request(
                    "invalid_request",
                    format!("unexpected form field {other:?}"),
                ))
            }
        }
    }
    let png = sketch.ok_or_else(|| ApiError::bad_request("invalid_image", "missing \"sketch\" field"))?;
    let decoded = decode_png(&png).map_err(|e| ApiError::bad_request("invalid_image", e.to_string()))?;
    let embedded = match embedded_target(&decoded) {
        Some(Ok(d)) => Some(d),
        Some(Err(e)) => return Err(ApiError::bad_request("invalid_image", format!("embedded diagram: {e}"))),
        None => None,
    };

    let canvas = match &config.canvas {
        Some(CanvasSpec::Text(t)) => t
            .parse::<Canvas>()
            .map_err(|e| ApiError::bad_request("invalid_config", e.to_string()))?,
        Some(CanvasSpec::Object(c)) => {
            Canvas::new(c.width, c.height).map_err(|e| ApiError::bad_request("invalid_config", e.to_string()))?
        }
        None => match (app.config.default_canvas(), &embedded) {
            (Some(c), _) => c,
            (None, Some(d)) => d.canvas,
            (None, None) => Canvas::new(decoded.image.width, decoded.image.height)
                .map_err(|e| ApiError::bad_request("invalid_image", e.to_string()))?,
        },
    };
    let mut sc = SessionConfig::new(canvas);
    if let Some(v) = config.instruction {
        sc.instruction = v;
    }
    if let Some(v) = config.max_steps {
        sc.max_steps = v;
    }
    if let Some(v) = config.candidate_count {
        sc.candidate_count = v;
    }
    if let Some(v) = config.equivalence_threshold {
        sc.equivalence_threshold = v;
    }
    if let Some(v) = config.max_consecutive_reverts {
        sc.max_consecutive_reverts = v;
    }
    if let Some(v) = config.max_in_flight {
        sc.max_in_flight = v;
    }
    if let Some(v) = config.review {
        sc.review = v;
    }
    sc.validate()?;

    let target = match config.target {
        Some(v) => Some(
            diagram_from_value(&v, canvas)
                .map_err(|e| ApiError::bad_request("invalid_config", format!("target: {e}")))?,
        ),
        None => embedded,
    };
    let backend = config.backend.unwrap_or(app.config.backend);
    if backend == BackendKind::Scripted {
        return Err(ApiError::bad_request(
            "invalid_config",
            "the scripted backend is only available for replay",
        ));
    }
    let gateway = (app.gateways)(backend, BackendInputs { target, script: None })
        .map_err(|e| ApiError::bad_request("invalid_config", e.to_string()))?;

    let meta = app.store.create_session(&sc, &backend.to_string(), &png)?;
    let id = meta.id.clone();
    let sink = Arc::new(app.store.sink(&id));
    let image = decoded.image;
    let init = blocking(move || Session::initialize(image, sc, gateway, sink)).await?;
    let session = match init {
        Ok(s) => s,
        Err(e) => {
            let _ = app.store.update_summary(
                &id,
                &crate::trace::StateSummary {
                    phase: Phase::Failed,
                    step_count: 0,
                },
            );
            return Err(e.into());
        }
    };
    let body = state_json(&id, session.state(), session.config(), false, None);
    app.slots
        .lock()
        .expect("slot map")
        .insert(id, Arc::new(Slot::new(session)));
    Ok((StatusCode::CREATED, Json(body)))
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    phase: Option<String>,
}

async fn list_sessions(State(app): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> Result<Json<Value>, ApiError> {
    let phase = q
        .phase
        .map(|p| p.parse::<Phase>())
        .transpose()
        .map_err(|e| ApiError::bad_request("invalid_request", e))?;
    let list = app.store.list_sessions(phase)?;
    Ok(Json(json!({ "sessions": list })))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    match app.slot_or_restore(&id) {
        Ok(slot) => {
            let s = slot.snapshot();
            let config = slot.session.try_lock().map(|g| g.config().clone()).ok();
            let config = match config {
                Some(c) => c,
                None => {
                    app.store
                        .load_trace(&id)?
                        .meta()
                        .map_err(|e| ApiError::internal(e.to_string()))?
                        .config
                }
            };
            let err = slot.last_error.read().expect("error lock").clone();
            Ok(Json(state_json(
                &id,
                &s,
                &config,
                slot.running.load(Ordering::Acquire),
                err,
            )))
        }
        // Sessions that never initialised still have a trace worth showing.
        Err(e) if e.status == StatusCode::CONFLICT => {
            let trace = app.store.load_trace(&id)?;
            let summary = app.store.list_sessions(None)?.into_iter().find(|s| s.id == id);
            Ok(Json(json!({
                "id": id,
                "phase": summary.map(|s| s.phase),
                "records": trace.records.len(),
                "resumable": false,
            })))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Deserialize)]
struct RunQuery {
    steps: Option<u32>,
}

async fn run_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RunQuery>,
) -> Result<Response, ApiError> {
    let k = q.steps.unwrap_or(1);
    if k == 0 {
        return Err(ApiError::bad_request("invalid_request", "steps must be at least 1"));
    }
    let slot = app.slot_or_restore(&id)?;
    let guard = slot.claim()?;
    let snap = slot.snapshot();
    if snap.phase.is_terminal() {
        return Err(ApiError::conflict(
            "invalid_phase",
            format!("session is {}", snap.phase),
        ));
    }
    let max_steps = slot.session.lock().expect("session lock").config().max_steps;
    let k = k.min(max_steps.saturating_sub(snap.step_count)).max(1);

    if k == 1 {
        let slot2 = slot.clone();
        let result = blocking(move || {
            let _guard = guard;
            let mut session = slot2.session.lock().expect("session lock");
            let r = session.run_step().map(step_summary);
            slot2.publish(&session);
            r
        })
        .await?;
        let step = result?;
        *slot.last_error.write().expect("error lock") = None;
        let s = slot.snapshot();
        return Ok(Json(json!({
            "steps": [step],
            "phase": s.phase,
            "step_count": s.step_count,
        }))
        .into_response());
    }

    let token = uuid::Uuid::new_v4().to_string();
    let slot2 = slot.clone();
    let run_token = token.clone();
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        for _ in 0..k {
            let mut session = slot2.session.lock().expect("session lock");
            if session.state().phase.is_terminal() {
                break;
            }
            let r = session.run_step().map(|_| ());
            slot2.publish(&session);
            if let Err(e) = r {
                tracing::warn!(run = %run_token, "run stopped: {e}");
                *slot2.last_error.write().expect("error lock") = Some(e.to_string());
                break;
            }
        }
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({"run_token": token, "steps_requested": k})),
    )
        .into_response())
}

async fn get_step(
    State(app): State<Arc<AppState>>,
    Path((id, n)): Path<(String, u32)>,
) -> Result<Json<Value>, ApiError> {
    let slot = app.slot_or_restore(&id)?;
    let snap = slot.snapshot();
    let r = snap
        .step(n)
        .ok_or_else(|| ApiError::not_found(format!("session {id} has no step {n}")))?
        .clone();
    let ss = slot
        .session
        .try_lock()
        .map(|s| s.gateway().policy.supersample)
        .unwrap_or(crate::render::DEFAULT_SUPERSAMPLE);
    let body = blocking(move || -> Result<Value, ApiError> {
        let candidates = r
            .candidates
            .iter()
            .enumerate()
            .map(|(k, c)| {
                Ok(json!({
                    "index": k + 1,
                    "strategy": c.strategy,
                    "diagram": diagram_json(&c.diagram),
                    "repair_count": c.repair_count,
                    "png": png_base64(&c.diagram, ss)?,
                }))
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        Ok(json!({
            "index": r.index,
            "outcome": r.outcome,
            "critique": {
                "scene_description": r.critique.scene_description,
                "discrepancies": r.critique.discrepancies,
                "suggestions": r.critique.suggestions,
            },
            "candidates": candidates,
            "verdict": r.verdict.as_ref().map(|v| json!({"selected": v.selected, "rationale": v.rationale})),
            "diagram_before": diagram_json(&r.diagram_before),
            "diagram_after": diagram_json(&r.diagram_after),
            "before_png": png_base64(&r.diagram_before, ss)?,
        }))
    })
    .await??;
    Ok(Json(body))
}

async fn override_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<Json<Value>, ApiError> {
    let action: Override =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("invalid_override", e.to_string()))?;
    let slot = app.slot_or_restore(&id)?;
    let guard = slot.claim()?;
    let slot2 = slot.clone();
    let result = blocking(move || {
        let _guard = guard;
        let mut session = slot2.session.lock().expect("session lock");
        let r = session.apply_override(action).map(|_| ());
        slot2.publish(&session);
        (r, session.config().clone())
    })
    .await?;
    result.0?;
    let s = slot.snapshot();
    Ok(Json(state_json(&id, &s, &result.1, false, None)))
}

async fn export_svg(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let current = match app.slot_or_restore(&id) {
        Ok(slot) => slot.snapshot().current,
        Err(e) if e.status == StatusCode::CONFLICT => {
            let trace = app.store.load_trace(&id)?;
            let canvas = trace
                .meta()
                .map_err(|e| ApiError::internal(e.to_string()))?
                .config
                .canvas;
            trace.last_diagram(canvas).unwrap_or_else(|| Diagram::empty(canvas))
        }
        Err(e) => return Err(e),
    };
    let svg = compile_svg(&current).text;
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], svg).into_response())
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    /// Skip this many records.
    from: Option<usize>,
}

struct Tail {
    path: PathBuf,
    offset: u64,
    pending: String,
    index: usize,
    skip: usize,
    poll: Duration,
    queue: std::collections::VecDeque<(usize, TraceRecord)>,
}

impl Tail {
    fn read_new(&mut self) -> std::io::Result<()> {
        let mut f = std::fs::File::open(&self.path)?;
        f.seek(SeekFrom::Start(self.offset))?;
        let mut buf = String::new();
        let n = f.read_to_string(&mut buf)?;
        self.offset += n as u64;
        self.pending.push_str(&buf);
        while let Some(pos) = self.pending.find('\n') {
            let line: String = self.pending.drain(..=pos).collect();
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(r) = serde_json::from_str::<TraceRecord>(&line) {
                if self.index >= self.skip {
                    self.queue.push_back((self.index, r));
                }
                self.index += 1;
            }
        }
        Ok(())
    }
}

async fn events(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    if !app.store.exists(&id) {
        return Err(ApiError::not_found(format!("unknown session {id}")));
    }
    let tail = Tail {
        path: app.store.trace_path(&id),
        offset: 0,
        pending: String::new(),
        index: 0,
        skip: q.from.unwrap_or(0),
        poll: app.event_poll,
        queue: Default::default(),
    };
    let stream = futures::stream::unfold(tail, |mut tail| async move {
        loop {
            if let Some((i, r)) = tail.queue.pop_front() {
                let event = Event::default()
                    .id(i.to_string())
                    .event(r.kind.as_str())
                    .data(r.to_line());
                return Some((Ok(event), tail));
            }
            if let Err(e) = tail.read_new() {
                tracing::warn!("event stream stopped: {e}");
                return None;
            }
            if tail.queue.is_empty() {
                tokio::time::sleep(tail.poll).await;
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
