//! HTTP session service.
//!
//! Every state change is computed on a copy of the session, appended to the
//! event log, and only then published. Mutations of one session are
//! serialized by a per-session lock; reads are served from the latest
//! published snapshot and never wait for a backend call.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{FromRequest, Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use storyprobe_core::assessment::{
    code_political, next_ingame_item, score_big_five, score_climate, InstrumentKind, NextItem,
    ResponseRecord, SurveyInstrument, Wave,
};
use storyprobe_core::clock::Clock;
use storyprobe_core::gateway::{ChatBackend, GatewayError, MockBackend};
use storyprobe_core::narrative::{
    replay, Classification, EventRecord, Game, NarrativeError, Phase, SessionEvent, SessionState,
    Transition,
};
use storyprobe_core::stats::{build_dataset, correlation_report, render_text, Dataset, Exclusion};
use tokio::net::TcpListener;

use crate::bundled;
use crate::config::{BackendConfig, Config, ConfigError};
use crate::formats::{self, FormatError, InstrumentSet, DEMOGRAPHIC_FIELDS};
use crate::live::LiveBackend;
use crate::store::{DemographicsRecord, Store, StoreError};
use crate::SystemClock;

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot load {what}: {source}")]
    Load {
        what: &'static str,
        #[source]
        source: FormatError,
    },
    #[error("campaign does not fit its survey: {0}")]
    Campaign(String),
    #[error("mock backend: {0}")]
    Backend(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("session {session} does not replay: {reason}")]
    Replay { session: String, reason: String },
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything a running service needs, assembled by the caller or by
/// [`ServiceParts::from_config`].
pub struct ServiceParts {
    pub game: Game,
    pub instruments: InstrumentSet,
    pub backend: Arc<dyn ChatBackend>,
    pub store: Store,
    pub clock: Arc<dyn Clock>,
    pub idle_timeout: Duration,
    pub auth_token: Option<String>,
}

fn load<T>(what: &'static str, r: Result<T, FormatError>) -> Result<T, StartupError> {
    r.map_err(|source| StartupError::Load { what, source })
}

/// The campaign bound to its survey, plus the instrument set, as named in
/// the configuration or bundled.
pub fn load_study(config: &Config) -> Result<(Game, InstrumentSet), StartupError> {
    let campaign = match &config.campaign {
        Some(p) => load("campaign file", formats::load_campaign(p))?,
        None => bundled::campaign(),
    };
    let instruments = match &config.instrument_dir {
        Some(p) => load("instrument directory", InstrumentSet::load_dir(p))?,
        None => bundled::instruments(),
    };
    let corpus = match &config.corpus {
        Some(p) => load("corpus", formats::load_corpus(p))?,
        None => bundled::corpus(),
    };
    let game = Game::new(
        campaign,
        instruments.ingame.instrument.clone(),
        corpus,
        config.game.clone(),
    )
    .map_err(|e| StartupError::Campaign(e.to_string()))?;
    Ok((game, instruments))
}

pub fn load_backend(config: &Config) -> Result<Arc<dyn ChatBackend>, StartupError> {
    Ok(match &config.backend {
        BackendConfig::Mock { script } => {
            let script = match script {
                Some(p) => load("mock script", formats::load_mock_script(p))?,
                None => bundled::mock_script(),
            };
            Arc::new(MockBackend::new(script).map_err(|e| StartupError::Backend(e.to_string()))?)
        }
        BackendConfig::Live(live) => {
            Arc::new(LiveBackend::new(live.settings(|k| std::env::var(k).ok())?))
        }
    })
}

impl ServiceParts {
    pub fn from_config(config: &Config) -> Result<Self, StartupError> {
        let (game, instruments) = load_study(config)?;
        let backend = load_backend(config)?;
        let auth_token = match &config.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::Field {
                field: "auth_token_env".into(),
                message: format!("environment variable {var} is not set"),
            })?),
            None => None,
        };
        Ok(Self {
            game,
            instruments,
            backend,
            store: Store::open(&config.data_dir)?,
            clock: Arc::new(SystemClock),
            idle_timeout: Duration::from_secs(config.idle_timeout_secs),
            auth_token,
        })
    }
}

/// Dataset built from what a data directory holds, as the service would
/// export it.
pub fn dataset_from_store(store: &Store, instruments: &InstrumentSet) -> Result<Dataset, StartupError> {
    let mut sessions = Vec::new();
    for (id, log) in store.load_events()? {
        sessions.push(replay(&log).map_err(|e| StartupError::Replay {
            session: id,
            reason: e.to_string(),
        })?);
    }
    let mut dataset = build_dataset(
        &instruments.study(),
        &store.load_responses()?,
        &sessions,
        &store.load_demographics()?,
    );
    dataset.rows.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
    Ok(dataset)
}

struct SessionData {
    state: SessionState,
    log: Vec<EventRecord>,
}

struct SessionCell {
    /// Held for the whole of a mutation, backend call included.
    write: tokio::sync::Mutex<()>,
    data: RwLock<SessionData>,
}

impl SessionCell {
    fn new(state: SessionState, log: Vec<EventRecord>) -> Self {
        Self {
            write: tokio::sync::Mutex::new(()),
            data: RwLock::new(SessionData { state, log }),
        }
    }

    fn state(&self) -> SessionState {
        self.data.read().expect("session lock").state.clone()
    }
}

struct Inner {
    game: Game,
    instruments: InstrumentSet,
    backend: Arc<dyn ChatBackend>,
    store: Store,
    clock: Arc<dyn Clock>,
    idle_timeout: Duration,
    auth_token: Option<String>,
    sessions: tokio::sync::RwLock<HashMap<String, Arc<SessionCell>>>,
    responses: std::sync::Mutex<Vec<ResponseRecord>>,
    demographics: std::sync::Mutex<BTreeMap<String, BTreeMap<String, String>>>,
}

/// Shared handle to a running service.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Rebuilds every session from the event log, then loads uploaded
    /// responses and demographics.
    pub fn new(parts: ServiceParts) -> Result<Self, StartupError> {
        let mut sessions = HashMap::new();
        for (id, log) in parts.store.load_events()? {
            let state = replay(&log).map_err(|e| StartupError::Replay {
                session: id.clone(),
                reason: e.to_string(),
            })?;
            sessions.insert(id, Arc::new(SessionCell::new(state, log)));
        }
        if !sessions.is_empty() {
            log::info!("recovered {} session(s) from the event log", sessions.len());
        }
        let responses = parts.store.load_responses()?;
        let demographics = parts.store.load_demographics()?;
        Ok(Self(Arc::new(Inner {
            game: parts.game,
            instruments: parts.instruments,
            backend: parts.backend,
            store: parts.store,
            clock: parts.clock,
            idle_timeout: parts.idle_timeout,
            auth_token: parts.auth_token,
            sessions: tokio::sync::RwLock::new(sessions),
            responses: std::sync::Mutex::new(responses),
            demographics: std::sync::Mutex::new(demographics),
        })))
    }

    pub fn router(&self) -> Router {
        let api = Router::new()
            .route("/sessions", post(create_session))
            .route("/sessions/{id}", get(get_session))
            .route("/sessions/{id}/events", get(get_events))
            .route("/sessions/{id}/messages", post(post_message))
            .route("/sessions/{id}/advance", post(advance))
            .route("/sessions/{id}/survey/current", get(current_item))
            .route("/sessions/{id}/survey/answers", post(answer_item))
            .route("/responses", post(upload_response))
            .route("/participants/{id}/demographics", post(upload_demographics))
            .route("/export", get(export_json))
            .route("/export.csv", get(export_csv))
            .route("/report", get(report_json))
            .route("/report.txt", get(report_text))
            .route_layer(middleware::from_fn_with_state(self.clone(), require_token));
        Router::new()
            .route("/health", get(health))
            .merge(api)
            .with_state(self.clone())
    }

    /// Current snapshot of a session.
    pub async fn session(&self, id: &str) -> Option<SessionState> {
        let cell = self.0.sessions.read().await.get(id).cloned()?;
        Some(cell.state())
    }

    /// Closes every open session idle for longer than the configured
    /// timeout. Sessions with a mutation in flight are skipped. Returns the
    /// number closed.
    pub async fn sweep_expired(&self) -> usize {
        let cells: Vec<Arc<SessionCell>> =
            self.0.sessions.read().await.values().cloned().collect();
        let mut closed = 0;
        for cell in cells {
            let Ok(_guard) = cell.write.try_lock() else {
                continue;
            };
            match self.expire_locked(&cell).await {
                Ok(true) => closed += 1,
                Ok(false) => {}
                Err(e) => log::error!("expiring session: {}", e.message),
            }
        }
        closed
    }

    /// Expires the session if it is idle. The caller holds the write lock.
    async fn expire_locked(&self, cell: &SessionCell) -> Result<bool, ApiError> {
        let state = cell.state();
        let Some(t) = self
            .0
            .game
            .expire(&state, self.0.idle_timeout, self.0.clock.as_ref())
        else {
            return Ok(false);
        };
        self.persist(t.records.clone()).await?;
        publish(cell, t);
        Ok(true)
    }

    async fn cell(&self, id: &str) -> Result<Arc<SessionCell>, ApiError> {
        self.0
            .sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    async fn persist(&self, records: Vec<EventRecord>) -> Result<(), ApiError> {
        if records.is_empty() {
            return Ok(());
        }
        let inner = self.0.clone();
        tokio::task::spawn_blocking(move || inner.store.append_events(&records))
            .await
            .map_err(ApiError::internal)?
            .map_err(ApiError::storage)
    }

    /// Runs `step` on a copy of the session under its write lock, persists
    /// the resulting records and publishes the new state. The step runs on
    /// the blocking pool because it may call the chat backend.
    async fn mutate<T, F>(&self, id: &str, step: F) -> Result<(Transition, T), ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Inner, &SessionState) -> Result<(Transition, T), ApiError> + Send + 'static,
    {
        let cell = self.cell(id).await?;
        let _guard = cell.write.lock().await;
        if self.expire_locked(&cell).await? {
            return Err(NarrativeError::SessionClosed.into());
        }
        let snapshot = cell.state();
        let inner = self.0.clone();
        let (transition, extra) =
            tokio::task::spawn_blocking(move || step(&inner, &snapshot))
                .await
                .map_err(ApiError::internal)??;
        self.persist(transition.records.clone()).await?;
        publish(&cell, transition.clone());
        Ok((transition, extra))
    }

    fn dataset(&self, filter: &ExportFilter) -> Result<Dataset, ApiError> {
        let (from, to) = filter.bounds()?;
        let in_range = |ts: u64| from.is_none_or(|f| ts >= f) && to.is_none_or(|t| ts < t);
        let responses: Vec<ResponseRecord> = self
            .0
            .responses
            .lock()
            .expect("responses lock")
            .iter()
            .filter(|r| in_range(r.timestamp))
            .cloned()
            .collect();
        let demographics = self.0.demographics.lock().expect("demographics lock").clone();
        let sessions: Vec<SessionState> = {
            let map = self.0.sessions.try_read().map_err(|_| {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "busy", "session table is busy")
                    .retryable()
            })?;
            let mut v: Vec<SessionState> = map
                .values()
                .map(|c| c.state())
                .filter(|s| {
                    filter
                        .campaign_id
                        .as_deref()
                        .is_none_or(|c| s.campaign_id == c)
                })
                .filter(|s| in_range(s.started_at))
                .collect();
            v.sort_by(|a, b| a.session_id.cmp(&b.session_id));
            v
        };
        Ok(build_dataset(
            &self.0.instruments.study(),
            &responses,
            &sessions,
            &demographics,
        ))
    }
}

fn publish(cell: &SessionCell, t: Transition) {
    let mut data = cell.data.write().expect("session lock");
    data.state = t.state;
    data.log.extend(t.records);
}

/// Binds the configured address and serves until `shutdown` resolves.
pub async fn serve(
    config: Config,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), StartupError> {
    let addr = config.listen_addr()?;
    let state = AppState::new(ServiceParts::from_config(&config)?)?;
    let listener = TcpListener::bind(addr).await.map_err(|source| StartupError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    log::info!("listening on {addr}");
    run(listener, state, shutdown)
        .await
        .map_err(|source| StartupError::Bind {
            addr: addr.to_string(),
            source,
        })
}

/// Serves on an already bound listener with a background expiry sweep.
/// In-flight requests are drained before this returns.
pub async fn run(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let period = (state.0.idle_timeout / 4).clamp(Duration::from_millis(50), Duration::from_secs(30));
    let sweeper = {
        let state = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                let n = state.sweep_expired().await;
                if n > 0 {
                    log::info!("closed {n} idle session(s)");
                }
            }
        })
    };
    let result = axum::serve(listener, state.router())
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    result
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: &'static str,
    pub message: String,
    /// The same request may succeed if sent again unchanged.
    pub retryable: bool,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            error,
            message: message.into(),
            retryable: false,
        }
    }

    fn retryable(mut self) -> Self {
        self.retryable = true;
        self
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
    }

    fn storage(e: StoreError) -> Self {
        log::error!("{e}");
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "storage", e.to_string()).retryable()
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl From<NarrativeError> for ApiError {
    fn from(e: NarrativeError) -> Self {
        let message = e.to_string();
        match e {
            NarrativeError::EmptyInput => {
                Self::new(StatusCode::BAD_REQUEST, "empty_input", message).retryable()
            }
            NarrativeError::Gateway(GatewayError::Timeout(_)) => {
                Self::new(StatusCode::GATEWAY_TIMEOUT, "backend_timeout", message).retryable()
            }
            NarrativeError::Gateway(_) => {
                Self::new(StatusCode::BAD_GATEWAY, "backend", message).retryable()
            }
            NarrativeError::WrongPhase { .. } => Self::new(StatusCode::CONFLICT, "wrong_phase", message),
            NarrativeError::Precondition(_) => Self::new(StatusCode::CONFLICT, "precondition", message),
            NarrativeError::SessionClosed => Self::new(StatusCode::GONE, "session_closed", message),
            NarrativeError::Survey(_) => Self::invalid(message),
            NarrativeError::Prompt(_) | NarrativeError::State(_) => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

/// JSON body extractor whose rejections use the service's error shape.
struct Body<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))
    }
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.0.auth_token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

// ---------------------------------------------------------------------------
// Sessions

#[derive(Debug, Serialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub state: SessionState,
    /// Narration of the most recent phase change (or the prologue).
    pub narration: Option<String>,
    /// Goal of the current level while it is being played.
    pub goal: Option<String>,
}

fn view(game: &Game, data: &SessionData) -> SessionView {
    let narration = data.log.iter().rev().find_map(|r| match &r.event {
        SessionEvent::PhaseChanged { narration, .. } => narration.clone(),
        SessionEvent::SessionStarted { prologue, .. } => Some(prologue.clone()),
        _ => None,
    });
    let goal = matches!(data.state.phase, Phase::Dialogue | Phase::Cutscene)
        .then(|| game.campaign().level(data.state.current_level))
        .flatten()
        .map(|l| l.goal_text.clone());
    SessionView {
        state: data.state.clone(),
        narration,
        goal,
    }
}

fn cell_view(game: &Game, cell: &SessionCell) -> SessionView {
    view(game, &cell.data.read().expect("session lock"))
}

#[derive(Debug, Serialize)]
struct Mutation<T: Serialize> {
    session: SessionView,
    events: Vec<EventRecord>,
    #[serde(flatten)]
    extra: T,
}

#[derive(Debug, Serialize)]
struct Nothing {}

async fn health(State(app): State<AppState>) -> Json<serde_json::Value> {
    let sessions = app.0.sessions.read().await.len();
    Json(serde_json::json!({
        "status": "ready",
        "campaign": app.0.game.campaign().id,
        "backend": app.0.backend.backend_id(),
        "sessions": sessions,
    }))
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    participant_id: String,
    #[serde(default)]
    seed: Option<u64>,
}

async fn create_session(
    State(app): State<AppState>,
    Body(req): Body<CreateSession>,
) -> Result<(StatusCode, Json<Mutation<Nothing>>), ApiError> {
    if req.participant_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "participant_id is empty"));
    }
    let seed = req.seed.unwrap_or_else(|| app.0.clock.now_ms());
    let t = app
        .0
        .game
        .start_session(&req.participant_id, seed, app.0.clock.as_ref())?;
    let id = t.state.session_id.clone();
    let mut sessions = app.0.sessions.write().await;
    if sessions.contains_key(&id) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "exists",
            format!("session {id} already exists for this participant and seed"),
        ));
    }
    app.persist(t.records.clone()).await?;
    let cell = Arc::new(SessionCell::new(t.state, t.records.clone()));
    let session = cell_view(&app.0.game, &cell);
    sessions.insert(id, cell);
    Ok((
        StatusCode::CREATED,
        Json(Mutation {
            session,
            events: t.records,
            extra: Nothing {},
        }),
    ))
}

async fn get_session(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionView>, ApiError> {
    let cell = app.cell(&id).await?;
    Ok(Json(cell_view(&app.0.game, &cell)))
}

async fn get_events(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Vec<EventRecord>>, ApiError> {
    let cell = app.cell(&id).await?;
    let log = cell.data.read().expect("session lock").log.clone();
    Ok(Json(log))
}

async fn respond<T: Serialize>(
    app: &AppState,
    id: &str,
    t: Transition,
    extra: T,
) -> Result<Json<Mutation<T>>, ApiError> {
    let cell = app.cell(id).await?;
    Ok(Json(Mutation {
        session: cell_view(&app.0.game, &cell),
        events: t.records,
        extra,
    }))
}

#[derive(Debug, Deserialize)]
struct PlayerMessage {
    text: String,
}

#[derive(Debug, Serialize)]
struct Reply {
    reply: String,
    classification: Classification,
}

async fn post_message(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Body(req): Body<PlayerMessage>,
) -> Result<Json<Mutation<Reply>>, ApiError> {
    let (t, reply) = app
        .mutate(&id, move |inner, state| {
            let turn = inner.game.handle_player_message(
                state,
                &req.text,
                inner.backend.as_ref(),
                inner.clock.as_ref(),
            )?;
            let reply = Reply {
                reply: turn.reply,
                classification: turn.classification,
            };
            Ok((
                Transition {
                    state: turn.state,
                    records: turn.records,
                },
                reply,
            ))
        })
        .await?;
    respond(&app, &id, t, reply).await
}

#[derive(Debug, Deserialize)]
struct Advance {
    /// The phase the client believes the session is in. A stale value is
    /// acknowledged without effect so that retries are harmless.
    from: Phase,
}

#[derive(Debug, Serialize)]
struct Applied {
    applied: bool,
}

async fn advance(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Body(req): Body<Advance>,
) -> Result<Json<Mutation<Applied>>, ApiError> {
    let (t, applied) = app
        .mutate(&id, move |inner, state| {
            if state.phase != req.from {
                let unchanged = Transition {
                    state: state.clone(),
                    records: Vec::new(),
                };
                return Ok((unchanged, Applied { applied: false }));
            }
            let t = inner.game.advance_phase(state, inner.clock.as_ref())?;
            Ok((t, Applied { applied: true }))
        })
        .await?;
    respond(&app, &id, t, applied).await
}

#[derive(Debug, Serialize)]
struct OptionView {
    number: u8,
    label: String,
}

#[derive(Debug, Serialize)]
struct ItemView {
    done: bool,
    /// Zero-based position of the item; equals `total` when done.
    index: usize,
    total: usize,
    item_id: Option<String>,
    npc_text: Option<String>,
    options: Vec<OptionView>,
}

async fn current_item(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ItemView>, ApiError> {
    let state = app.cell(&id).await?.state();
    let survey = app.0.game.survey();
    let next = next_ingame_item(&state, survey)
        .map_err(|e| ApiError::new(StatusCode::CONFLICT, "wrong_phase", e.to_string()))?;
    let total = state.survey_len;
    Ok(Json(match next {
        NextItem::Done => ItemView {
            done: true,
            index: state.survey_cursor,
            total,
            item_id: None,
            npc_text: None,
            options: Vec::new(),
        },
        NextItem::Item(item) => ItemView {
            done: false,
            index: state.survey_cursor,
            total,
            item_id: Some(item.id.clone()),
            npc_text: Some(item.npc_text.clone()),
            options: item
                .options
                .iter()
                .enumerate()
                .map(|(i, o)| OptionView {
                    number: i as u8 + 1,
                    label: o.label.clone(),
                })
                .collect(),
        },
    }))
}

#[derive(Debug, Deserialize)]
struct SurveyAnswerBody {
    item_id: String,
    option: u8,
}

async fn answer_item(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Body(req): Body<SurveyAnswerBody>,
) -> Result<Json<Mutation<Nothing>>, ApiError> {
    let (t, _) = app
        .mutate(&id, move |inner, state| {
            let t = inner
                .game
                .answer_survey(state, &req.item_id, req.option, inner.clock.as_ref())?;
            Ok((t, ()))
        })
        .await?;
    respond(&app, &id, t, Nothing {}).await
}

// ---------------------------------------------------------------------------
// Uploads

#[derive(Debug, Deserialize)]
struct ResponseUpload {
    participant_id: String,
    instrument_id: String,
    #[serde(default)]
    instrument_version: Option<String>,
    /// `pre` or `post`.
    wave: String,
    #[serde(default)]
    timestamp: Option<u64>,
    answers: BTreeMap<String, u8>,
}

fn check_scores(instrument: &SurveyInstrument, record: &ResponseRecord) -> Result<(), String> {
    let r = match instrument.kind {
        InstrumentKind::Climate => score_climate(instrument, record).map(drop),
        InstrumentKind::BigFive => score_big_five(instrument, record).map(drop),
        InstrumentKind::Political => code_political(instrument, record).map(drop),
        InstrumentKind::InGame => {
            return Err("in-game answers are recorded through sessions".into())
        }
    };
    r.map_err(|e| e.to_string())
}

async fn upload_response(
    State(app): State<AppState>,
    Body(req): Body<ResponseUpload>,
) -> Result<(StatusCode, Json<ResponseRecord>), ApiError> {
    if req.participant_id.trim().is_empty() {
        return Err(ApiError::invalid("participant_id is empty"));
    }
    let wave: Wave = req.wave.parse().map_err(ApiError::invalid)?;
    if wave == Wave::InGame {
        return Err(ApiError::invalid("uploads are for the pre and post waves"));
    }
    let instrument = app
        .0
        .instruments
        .by_id(&req.instrument_id)
        .ok_or_else(|| ApiError::invalid(format!("unknown instrument {}", req.instrument_id)))?;
    let record = ResponseRecord {
        participant_id: req.participant_id,
        instrument_id: req.instrument_id,
        instrument_version: req
            .instrument_version
            .unwrap_or_else(|| instrument.version.clone()),
        timestamp: req.timestamp.unwrap_or_else(|| app.0.clock.now_ms()),
        wave,
        answers: req.answers,
    };
    check_scores(instrument, &record).map_err(ApiError::invalid)?;
    let inner = app.0.clone();
    let to_store = record.clone();
    tokio::task::spawn_blocking(move || inner.store.append_response(&to_store))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::storage)?;
    app.0.responses.lock().expect("responses lock").push(record.clone());
    Ok((StatusCode::CREATED, Json(record)))
}

/// Allowed codes per demographic field. Matching ignores case; the stored
/// value is the code as written here.
pub const DEMOGRAPHIC_CODES: [(&str, &[&str]); 5] = [
    ("gender", &["Male", "Female", "Non-binary", "Prefer not to say"]),
    (
        "age",
        &["Under 18", "18-24", "25-34", "35-44", "45-54", "55-64", "65 or older", "Prefer not to say"],
    ),
    (
        "education",
        &[
            "Less than high school",
            "High school",
            "Some college",
            "Vocational/associate degree",
            "Bachelor's degree",
            "Some graduate school",
            "Graduate degree",
            "Prefer not to say",
        ],
    ),
    (
        "occupation",
        &[
            "Student",
            "Employed for wages",
            "Self-employed",
            "Out of work",
            "Homemaker",
            "Retired",
            "Unable to work",
            "Prefer not to say",
        ],
    ),
    (
        "ethnicity",
        &[
            "Asian/Pacific Islander",
            "White",
            "Black or African American",
            "Hispanic or Latino",
            "Native American",
            "Other",
            "Prefer not to say",
        ],
    ),
];

/// Canonical code for a demographic answer, or why it was refused.
pub fn demographic_code(field: &str, value: &str) -> Result<&'static str, String> {
    let (_, codes) = DEMOGRAPHIC_CODES
        .iter()
        .find(|(f, _)| *f == field)
        .ok_or_else(|| format!("unknown field {field}; expected one of {}", DEMOGRAPHIC_FIELDS.join(", ")))?;
    codes
        .iter()
        .find(|c| c.eq_ignore_ascii_case(value.trim()))
        .copied()
        .ok_or_else(|| format!("{field}: {value:?} is not one of {}", codes.join(", ")))
}

async fn upload_demographics(
    State(app): State<AppState>,
    UrlPath(participant_id): UrlPath<String>,
    Body(fields): Body<BTreeMap<String, String>>,
) -> Result<StatusCode, ApiError> {
    let fields = fields
        .iter()
        .map(|(k, v)| demographic_code(k, v).map(|c| (k.clone(), c.to_string())))
        .collect::<Result<BTreeMap<_, _>, _>>()
        .map_err(ApiError::invalid)?;
    let record = DemographicsRecord {
        participant_id: participant_id.clone(),
        timestamp: app.0.clock.now_ms(),
        fields: fields.clone(),
    };
    let inner = app.0.clone();
    tokio::task::spawn_blocking(move || inner.store.append_demographics(&record))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::storage)?;
    app.0
        .demographics
        .lock()
        .expect("demographics lock")
        .insert(participant_id, fields);
    Ok(StatusCode::CREATED)
}

// ---------------------------------------------------------------------------
// Export and report

#[derive(Debug, Default, Deserialize)]
struct ExportFilter {
    campaign_id: Option<String>,
    /// Inclusive UTC date, `YYYY-MM-DD`.
    from: Option<String>,
    /// Inclusive UTC date, `YYYY-MM-DD`.
    to: Option<String>,
}

impl ExportFilter {
    /// Millisecond bounds `[from, to)`.
    fn bounds(&self) -> Result<(Option<u64>, Option<u64>), ApiError> {
        let day = |s: &Option<String>, offset: i64| -> Result<Option<u64>, ApiError> {
            let Some(s) = s else { return Ok(None) };
            let d = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map_err(|_| ApiError::invalid(format!("{s:?} is not a YYYY-MM-DD date")))?;
            let ms = (d + chrono::Days::new(offset as u64))
                .and_hms_opt(0, 0, 0)
                .expect("midnight")
                .and_utc()
                .timestamp_millis();
            Ok(Some(ms.max(0) as u64))
        };
        Ok((day(&self.from, 0)?, day(&self.to, 1)?))
    }
}

#[derive(Debug, Serialize)]
struct Export {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
    exclusions: Vec<Exclusion>,
    ignored_records: usize,
    /// SHA-256 of each instrument file the scores were computed against.
    instruments: BTreeMap<String, String>,
}

async fn export_json(
    State(app): State<AppState>,
    Query(filter): Query<ExportFilter>,
) -> Result<Json<Export>, ApiError> {
    let mut dataset = app.dataset(&filter)?;
    dataset.rows.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
    Ok(Json(Export {
        columns: formats::dataset_columns(),
        rows: dataset.rows.iter().map(formats::dataset_row).collect(),
        exclusions: dataset.exclusions,
        ignored_records: dataset.ignored_records,
        instruments: app
            .0
            .instruments
            .all()
            .iter()
            .map(|l| (l.instrument.id.clone(), l.sha256.clone()))
            .collect(),
    }))
}

async fn export_csv(
    State(app): State<AppState>,
    Query(filter): Query<ExportFilter>,
) -> Result<Response, ApiError> {
    let dataset = app.dataset(&filter)?;
    let csv = formats::dataset_to_csv(&dataset).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

fn report_of(dataset: &Dataset) -> Result<storyprobe_core::stats::CorrelationReport, ApiError> {
    correlation_report(&dataset.rows).map_err(|e| ApiError::invalid(e.to_string()))
}

async fn report_json(
    State(app): State<AppState>,
    Query(filter): Query<ExportFilter>,
) -> Result<Json<storyprobe_core::stats::CorrelationReport>, ApiError> {
    Ok(Json(report_of(&app.dataset(&filter)?)?))
}

async fn report_text(
    State(app): State<AppState>,
    Query(filter): Query<ExportFilter>,
) -> Result<Response, ApiError> {
    let report = report_of(&app.dataset(&filter)?)?;
    Ok((
        [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
        render_text(&report),
    )
        .into_response())
}

