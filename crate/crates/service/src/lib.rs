//! HTTP facade over the engine. All routes live under `/v1`.
//!
//! Turns run on the blocking pool; a session handles one turn at a time and
//! answers 409 to overlapping requests instead of queueing them.

mod error;

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post, put};
use axum::{middleware, Json, Router};
use futures_util::stream::Stream;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tracing::{info, warn};

use tidyhome_core::domain::{DestinationId, Timestamp, UserRequest, WorldState};
use tidyhome_core::eval::{run_phase, BackendSpec, EmbedderSpec, EvalReport, RunSpec};
use tidyhome_core::fixtures::FixtureSet;
use tidyhome_core::gateway::{BackendConfig, OpenAiBackend};
use tidyhome_core::historian::ContextMode;
use tidyhome_core::memory::{DialogueEntry, MemoryStore};
use tidyhome_core::orchestrator::{AgentBackends, Session, SessionConfig, TurnEvent, TurnRecord, TurnResult};
use tidyhome_core::router::RoutingMode;
use tidyhome_core::simulator::ScenarioId;

pub use error::{ApiError, CORRELATION_HEADER};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Backend for sessions that do not name one.
    pub default_backend: BackendSpec,
    pub default_embedder: EmbedderSpec,
    /// Allowed browser origins; `*` allows any.
    pub cors_origins: Vec<String>,
    pub fixtures: Arc<FixtureSet>,
    /// When set, each session's memory is journaled to `<dir>/<id>.jsonl`.
    pub memory_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            default_backend: BackendSpec::Scripted {
                script: "qwen_like".into(),
            },
            default_embedder: EmbedderSpec::Hash,
            cors_origins: vec!["http://localhost:5173".into()],
            fixtures: Arc::new(FixtureSet::builtin()),
            memory_dir: None,
        }
    }
}

/// Per-session overrides accepted when creating a session.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSettings {
    #[serde(default)]
    pub backend: Option<BackendSpec>,
    #[serde(default)]
    pub router: Option<BackendSpec>,
    #[serde(default)]
    pub planner: Option<BackendSpec>,
    #[serde(default)]
    pub historian: Option<BackendSpec>,
    #[serde(default)]
    pub embedder: Option<EmbedderSpec>,
    #[serde(default)]
    pub routing_mode: Option<RoutingMode>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub context: Option<ContextMode>,
    /// Object → destination actually executed, whatever the plan says.
    #[serde(default)]
    pub error_injection: BTreeMap<String, DestinationId>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub scenario: ScenarioId,
    #[serde(default)]
    pub config: SessionSettings,
    /// Reusing an id resumes its journaled memory (when a memory dir is set).
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub scenario: ScenarioId,
    pub turns: u64,
    pub history_len: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnBody {
    pub text: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBody {
    pub scenario: ScenarioId,
}

#[derive(Debug, Deserialize)]
pub struct WorldQuery {
    pub scenario: Option<ScenarioId>,
}

/// Payload of the `stage` server-sent event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageMessage {
    pub session_id: String,
    pub turn: u64,
    #[serde(flatten)]
    pub event: TurnEvent,
}

#[derive(Debug, Clone)]
enum StreamMessage {
    Stage(StageMessage),
    Turn(Arc<TurnRecord>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRun {
    pub id: String,
    pub status: RunStatus,
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<Arc<EvalReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub unreachable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BackendHealth {
    pub role: String,
    pub model: String,
    pub reachable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sessions: usize,
    pub backends: Vec<BackendHealth>,
}

struct SessionSlot {
    session: Mutex<Session>,
    busy: AtomicBool,
    events: broadcast::Sender<StreamMessage>,
}

/// Clears the busy flag when the turn ends, however it ends.
struct TurnGuard(Arc<SessionSlot>);

impl Drop for TurnGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

impl SessionSlot {
    fn try_begin(self: &Arc<Self>) -> Option<TurnGuard> {
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| TurnGuard(self.clone()))
    }
}

struct Shared {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
    runs: RwLock<HashMap<String, EvalRun>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self(Arc::new(Shared {
            config,
            sessions: RwLock::new(HashMap::new()),
            runs: RwLock::new(HashMap::new()),
        }))
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        self.0
            .sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }
}

pub fn router(state: AppState) -> Router {
    let cors = cors_layer(&state.0.config.cors_origins);
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/turns", post(post_turn))
        .route("/sessions/{id}/scenario", put(put_scenario))
        .route("/sessions/{id}/world", get(get_world))
        .route("/sessions/{id}/history", get(get_history))
        .route("/sessions/{id}/events", get(get_events))
        .route("/eval/runs", post(create_run))
        .route("/eval/runs/{id}", get(get_run));
    Router::new()
        .nest("/v1", api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this route")
        })
        .with_state(state)
        .layer(middleware::from_fn(error::correlate))
        .layer(cors)
}

fn cors_layer(origins: &[String]) -> CorsLayer {
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::PUT])
        .allow_headers([header::CONTENT_TYPE, header::HeaderName::from_static("x-request-id")])
        .expose_headers([header::HeaderName::from_static(CORRELATION_HEADER)])
}

/// Serves on an already bound listener until Ctrl-C.
pub async fn serve(config: ServiceConfig, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(AppState::new(config)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    let config = state.0.config.clone();
    let sessions = state.0.sessions.read().len();
    let backends = blocking(move || {
        let mut out = vec![probe("chat", &config.default_backend)];
        if let EmbedderSpec::Openai(cfg) = &config.default_embedder {
            out.push(probe_openai("embedder", cfg));
        }
        out
    })
    .await
    .unwrap_or_default();
    let status = if backends.iter().all(|b| b.reachable) { "ok" } else { "degraded" };
    Json(Health {
        status: status.into(),
        sessions,
        backends,
    })
}

fn probe(role: &str, spec: &BackendSpec) -> BackendHealth {
    match spec {
        BackendSpec::Openai(cfg) => probe_openai(role, cfg),
        BackendSpec::Scripted { script } => {
            let r = spec.connect();
            BackendHealth {
                role: role.into(),
                model: script.clone(),
                reachable: r.is_ok(),
                error: r.err().map(|e| e.to_string()),
            }
        }
    }
}

fn probe_openai(role: &str, cfg: &BackendConfig) -> BackendHealth {
    let r = OpenAiBackend::new(cfg.clone()).and_then(|b| b.ping());
    BackendHealth {
        role: role.into(),
        model: cfg.model.clone(),
        reachable: r.is_ok(),
        error: r.err().map(|e| e.to_string()),
    }
}

fn build_session(config: &ServiceConfig, id: &str, req: CreateSession) -> Result<Session, ApiError> {
    let s = req.config;
    let bad = |what: &str, e: &dyn std::fmt::Display| ApiError::validation(format!("{what}: {e}"));
    let connect = |spec: Option<&BackendSpec>, what: &str| {
        spec.unwrap_or(s.backend.as_ref().unwrap_or(&config.default_backend))
            .connect()
            .map_err(|e| bad(what, &e))
    };
    let embedder = s
        .embedder
        .as_ref()
        .unwrap_or(&config.default_embedder)
        .connect()
        .map_err(|e| bad("embedder", &e))?;
    let backends = AgentBackends {
        router: connect(s.router.as_ref(), "router")?,
        planner: connect(s.planner.as_ref(), "planner")?,
        historian: connect(s.historian.as_ref(), "historian")?,
        embedder: embedder.clone(),
    };
    let mut session_config = SessionConfig::new(backends);
    session_config.prompts = Arc::new(config.fixtures.prompts.clone());
    if let Some(mode) = s.routing_mode {
        session_config.routing_mode = mode;
    }
    if let Some(k) = s.k {
        if k == 0 {
            return Err(ApiError::validation("k must be at least 1"));
        }
        session_config.historian.k = k;
    }
    if let Some(mode) = s.context {
        session_config.historian.mode = mode;
    }
    session_config.error_injection = s.error_injection;

    let memory = match &config.memory_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| ApiError::internal(format!("memory dir: {e}")))?;
            MemoryStore::open(&dir.join(format!("{id}.jsonl")), embedder.model_id())
                .map_err(|e| bad("memory", &e))?
        }
        None => MemoryStore::new(),
    };
    let mut session = Session::with_memory(id, req.scenario, session_config, memory);
    for scenario in &config.fixtures.scenarios {
        session.load_scenario(scenario.clone());
    }
    session.set_scenario(req.scenario);
    Ok(session)
}

fn info_of(session: &Session) -> SessionInfo {
    SessionInfo {
        id: session.id().to_string(),
        scenario: session.active_scenario(),
        turns: session.turn_count(),
        history_len: session.memory().len(),
    }
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    let id = match &req.id {
        Some(id) if !valid_id(id) => {
            return Err(ApiError::validation("session id must be 1-64 characters of [A-Za-z0-9_-]"))
        }
        Some(id) => id.clone(),
        None => uuid::Uuid::new_v4().simple().to_string(),
    };
    if state.0.sessions.read().contains_key(&id) {
        return Err(ApiError::new(StatusCode::CONFLICT, "session_exists", format!("session `{id}` already exists")));
    }
    let st = state.clone();
    let session = blocking(move || build_session(&st.0.config, &id, req)).await??;
    let info = info_of(&session);
    let (events, _) = broadcast::channel(256);
    let slot = Arc::new(SessionSlot {
        session: Mutex::new(session),
        busy: AtomicBool::new(false),
        events,
    });
    {
        let mut sessions = state.0.sessions.write();
        if sessions.contains_key(&info.id) {
            return Err(ApiError::new(StatusCode::CONFLICT, "session_exists", format!("session `{}` already exists", info.id)));
        }
        sessions.insert(info.id.clone(), slot);
    }
    info!(session = %info.id, scenario = %info.scenario.as_str(), "session created");
    Ok((StatusCode::CREATED, Json(info)))
}

async fn session_info(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionInfo>, ApiError> {
    let slot = state.slot(&id)?;
    let info = info_of(&slot.session.lock());
    Ok(Json(info))
}

async fn post_turn(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<TurnBody>, JsonRejection>,
) -> Result<Json<TurnRecord>, ApiError> {
    let Json(body) = body?;
    let slot = state.slot(&id)?;
    let request = UserRequest::new(body.text, id.clone(), Timestamp::now()).map_err(|e| ApiError::validation(e.to_string()))?;
    let guard = slot.try_begin().ok_or_else(|| ApiError::busy(&id))?;
    let record = blocking(move || {
        let slot = &guard.0;
        let mut session = slot.session.lock();
        let turn = session.turn_count() + 1;
        let tx = slot.events.clone();
        let sid = session.id().to_string();
        let record = session.handle_turn_observed(&request, &mut |event| {
            let _ = tx.send(StreamMessage::Stage(StageMessage {
                session_id: sid.clone(),
                turn,
                event: event.clone(),
            }));
        });
        let _ = tx.send(StreamMessage::Turn(Arc::new(record.clone())));
        drop(session);
        drop(guard);
        record
    })
    .await?;
    if let TurnResult::Failed(f) = &record.result {
        if f.transport {
            warn!(session = %id, stage = f.stage.as_str(), "backend unreachable");
            return Err(ApiError::backend(f.stage.as_str(), f.message.clone()));
        }
    }
    Ok(Json(record))
}

async fn put_scenario(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ScenarioBody>, JsonRejection>,
) -> Result<Json<SessionInfo>, ApiError> {
    let Json(body) = body?;
    let slot = state.slot(&id)?;
    let _guard = slot.try_begin().ok_or_else(|| ApiError::busy(&id))?;
    let mut session = slot.session.lock();
    session.set_scenario(body.scenario);
    Ok(Json(info_of(&session)))
}

async fn get_world(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<WorldQuery>,
) -> Result<Json<WorldState>, ApiError> {
    let slot = state.slot(&id)?;
    let session = slot.session.lock();
    let world = match q.scenario {
        None => session.world().clone(),
        Some(s) => session
            .world_of(s)
            .cloned()
            .ok_or_else(|| ApiError::not_found("scenario for this session", s.as_str()))?,
    };
    Ok(Json(world))
}

async fn get_history(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Vec<DialogueEntry>>, ApiError> {
    let slot = state.slot(&id)?;
    let history = slot.session.lock().history();
    Ok(Json(history))
}

/// Server-sent events: `stage` for each lifecycle step, then `turn` with
/// the full record.
async fn get_events(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let rx = state.slot(&id)?.events.subscribe();
    let stream = futures_util::stream::unfold(rx, |mut rx| async move {
        loop {
            let msg = match rx.recv().await {
                Ok(m) => m,
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    warn!(skipped = n, "event subscriber lagged");
                    continue;
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            };
            let event = match msg {
                StreamMessage::Stage(s) => Event::default().event("stage").json_data(&s),
                StreamMessage::Turn(t) => Event::default().event("turn").json_data(&*t),
            };
            match event {
                Ok(e) => return Some((Ok(e), rx)),
                Err(e) => warn!(error = %e, "event not serializable"),
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn create_run(
    State(state): State<AppState>,
    body: Result<Json<RunSpec>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(spec) = body?;
    spec.validate().map_err(|e| ApiError::validation(e.to_string()))?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let run = EvalRun {
        id: id.clone(),
        status: RunStatus::Running,
        phase: spec.phase.as_str().into(),
        report: None,
        error: None,
        unreachable: false,
    };
    state.0.runs.write().insert(id.clone(), run.clone());
    let st = state.clone();
    let run_id = id.clone();
    tokio::task::spawn_blocking(move || {
        let result = run_phase(&spec, &st.0.config.fixtures);
        let mut runs = st.0.runs.write();
        let Some(run) = runs.get_mut(&run_id) else { return };
        match result {
            Ok(report) => {
                run.status = RunStatus::Done;
                run.report = Some(Arc::new(report));
            }
            Err(e) => {
                warn!(run = %run_id, error = %e, "evaluation failed");
                run.status = RunStatus::Failed;
                run.unreachable = e.is_unreachable();
                run.error = Some(error_chain(&e));
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(run)))
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut text = e.to_string();
    let mut source = e.source();
    while let Some(s) = source {
        text.push_str(": ");
        text.push_str(&s.to_string());
        source = s.source();
    }
    text
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<EvalRun>, ApiError> {
    state
        .0
        .runs
        .read()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("evaluation run", &id))
}
