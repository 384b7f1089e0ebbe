//! HTTP service. Models load in the background; until they are ready every
//! model endpoint answers 503 and `/health` reports `loading`. Edits run on
//! the blocking pool, one at a time per session, and sessions persist under
//! the sessions directory after every successful edit.

mod handlers;
pub mod wire;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use anyhow::Context;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use wspace_core::config::Config;
use wspace_core::latent_opt::{OptimTrace, RunControl};
use wspace_core::pipeline::{EditSession, Models, PipelineConfig, StrategyRegistry, SESSION_FILE};
use wspace_core::Error;

use crate::artifacts::{load_models, ModelInfo};
use wire::ErrorBody;

/// An HTTP status with a message, sent as `{"error": ...}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::ShapeMismatch { .. }
            | Error::UnsupportedResolution(..)
            | Error::Image(_)
            | Error::GrammarExhausted { .. } => StatusCode::BAD_REQUEST,
            Error::MissingModel(_) => StatusCode::SERVICE_UNAVAILABLE,
            Error::Cancelled => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum JobStatus {
    Idle,
    Running,
    Cancelled,
    Failed,
}

impl JobStatus {
    fn as_str(self) -> &'static str {
        match self {
            JobStatus::Idle => "idle",
            JobStatus::Running => "running",
            JobStatus::Cancelled => "cancelled",
            JobStatus::Failed => "failed",
        }
    }
}

struct Job {
    status: JobStatus,
    error: Option<String>,
    control: RunControl,
}

/// One session and the state of its most recent edit.
pub struct SessionSlot {
    session: Mutex<EditSession>,
    job: Mutex<Job>,
}

impl SessionSlot {
    fn new(session: EditSession) -> Self {
        SessionSlot {
            session: Mutex::new(session),
            job: Mutex::new(Job { status: JobStatus::Idle, error: None, control: RunControl::new() }),
        }
    }

    fn snapshot(&self) -> EditSession {
        self.session.lock().expect("session lock").clone()
    }

    /// Claim the slot for a new edit; 409 if one is running.
    fn begin(&self) -> ApiResult<RunControl> {
        let mut job = self.job.lock().expect("job lock");
        if job.status == JobStatus::Running {
            return Err(ApiError::new(StatusCode::CONFLICT, "an edit is already running in this session"));
        }
        *job = Job { status: JobStatus::Running, error: None, control: RunControl::new() };
        Ok(job.control.clone())
    }

    fn finish(&self, outcome: &wspace_core::Result<()>) {
        let mut job = self.job.lock().expect("job lock");
        (job.status, job.error) = match outcome {
            Ok(()) => (JobStatus::Idle, None),
            Err(Error::Cancelled) => (JobStatus::Cancelled, Some(Error::Cancelled.to_string())),
            Err(e) => (JobStatus::Failed, Some(e.to_string())),
        };
    }

    fn status(&self) -> (JobStatus, Option<String>, OptimTrace) {
        let job = self.job.lock().expect("job lock");
        (job.status, job.error.clone(), job.control.progress())
    }

    /// Request cancellation; false when nothing is running.
    fn cancel(&self) -> bool {
        let job = self.job.lock().expect("job lock");
        let running = job.status == JobStatus::Running;
        if running {
            job.control.cancel();
        }
        running
    }
}

pub struct AppState {
    pub config: Config,
    pub registry: StrategyRegistry,
    models: RwLock<Option<(Arc<Models>, Vec<ModelInfo>)>>,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
}

impl AppState {
    /// State with no models yet.
    pub fn new(config: Config) -> Arc<Self> {
        Arc::new(AppState {
            config,
            registry: StrategyRegistry::default(),
            models: RwLock::new(None),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn set_models(&self, models: Models, infos: Vec<ModelInfo>) {
        *self.models.write().expect("models lock") = Some((Arc::new(models), infos));
    }

    pub fn is_ready(&self) -> bool {
        self.models.read().expect("models lock").is_some()
    }

    fn models(&self) -> ApiResult<Arc<Models>> {
        self.models
            .read()
            .expect("models lock")
            .as_ref()
            .map(|(m, _)| m.clone())
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "models are still loading"))
    }

    fn model_infos(&self) -> Vec<ModelInfo> {
        self.models.read().expect("models lock").as_ref().map_or_else(Vec::new, |(_, i)| i.clone())
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.config.sessions_dir().join(id)
    }

    /// A live session, loading it from disk on first use.
    fn session(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        let mut map = self.sessions.lock().expect("sessions lock");
        if let Some(s) = map.get(id) {
            return Ok(s.clone());
        }
        let dir = self.session_dir(id);
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid || !dir.join(SESSION_FILE).exists() {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no session {id:?}")));
        }
        let slot = Arc::new(SessionSlot::new(EditSession::load(&dir)?));
        map.insert(id.to_string(), slot.clone());
        Ok(slot)
    }

    /// Register a new session and persist its source.
    fn create_session(&self, session: EditSession) -> ApiResult<Arc<SessionSlot>> {
        let id = session.id().to_string();
        let mut map = self.sessions.lock().expect("sessions lock");
        if map.contains_key(&id) || self.session_dir(&id).join(SESSION_FILE).exists() {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("session {id:?} already exists")));
        }
        session.save(&self.session_dir(&id))?;
        let slot = Arc::new(SessionSlot::new(session));
        map.insert(id, slot.clone());
        Ok(slot)
    }

    /// Ids of live and persisted sessions.
    fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().expect("sessions lock").keys().cloned().collect();
        if let Ok(entries) = std::fs::read_dir(self.config.sessions_dir()) {
            for e in entries.flatten() {
                if e.path().join(SESSION_FILE).exists() {
                    ids.push(e.file_name().to_string_lossy().into_owned());
                }
            }
        }
        ids.sort();
        ids.dedup();
        ids
    }

    /// Pipeline settings with an optional per-request iteration count.
    fn pipeline(&self, iterations: Option<usize>) -> ApiResult<PipelineConfig> {
        let mut p = self.config.pipeline();
        if let Some(it) = iterations {
            let max = self.config.serve.max_iterations;
            if it == 0 || it > max {
                return Err(ApiError::bad_request(format!("iterations must lie in 1..={max}")));
            }
            p.optim.iterations = it;
        }
        Ok(p)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(handlers::health))
        .route("/models", get(handlers::models))
        .route("/layers", get(handlers::layers))
        .route("/invert", post(handlers::invert))
        .route("/generate", post(handlers::generate))
        .route("/manipulate", post(handlers::manipulate))
        .route("/roi-edit", post(handlers::roi_edit))
        .route("/mix", post(handlers::mix))
        .route("/sessions", get(handlers::list_sessions))
        .route("/sessions/{id}", get(handlers::get_session))
        .route("/sessions/{id}/history", get(handlers::history))
        .route("/sessions/{id}/trace", get(handlers::trace))
        .route("/sessions/{id}/cancel", post(handlers::cancel))
        .route("/sessions/{id}/replay", post(handlers::replay))
        .with_state(state)
}

/// Bind, load models in the background and serve until interrupted.
pub async fn serve(config: Config, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    let state = AppState::new(config);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match load_models(&loader.config) {
        Ok((m, infos)) => {
            log::info!("loaded {} artifacts", infos.len());
            loader.set_models(m, infos);
        }
        Err(e) => log::error!("loading models failed: {e}"),
    });
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("serving")
}
