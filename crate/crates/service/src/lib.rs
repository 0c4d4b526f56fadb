//! HTTP service for live adaptive testing sessions.
//!
//! Each session is driven by a single serialized executor; readers get the
//! last committed snapshot and never wait on an in-flight update.

mod api;
mod error;
mod model;
mod schema;
mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::routing::{get, post};
use axum::Router;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub use api::{
    CreateSessionRequest, CreateSessionResponse, EstimatesResponse, ItemEcho, PendingItem, SubmitRequest,
    SubmitResponse,
};
pub use error::ApiError;
pub use model::Model;
pub use schema::api_schema;
pub use store::{SessionMeta, Store};

use api::SessionHandle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub model_path: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub bind: SocketAddr,
    /// Latent-update iterations after each response.
    pub update_iterations: usize,
    /// Full update run once the budget is reached.
    pub final_update_iterations: usize,
    pub default_budget: usize,
    pub mi: dlvm::MiConfig,
    /// Directory with the participant front-end bundle, served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            model_path: None,
            data_dir: PathBuf::from("sessions"),
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            update_iterations: 800,
            final_update_iterations: 4000,
            default_budget: 100,
            mi: dlvm::MiConfig::default(),
            static_dir: None,
        }
    }
}

/// Shared service state.
pub struct AppState {
    pub config: ServiceConfig,
    pub model: Option<Model>,
    store: Store,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    /// Opens the data directory and replays every stored session.
    pub fn new(config: ServiceConfig, model: Option<Model>) -> dlvm::Result<Arc<Self>> {
        let store = Store::open(&config.data_dir)?;
        let mut sessions = HashMap::new();
        if let Some(model) = &model {
            for (meta, log) in store.load_all()? {
                if meta.model_sha256 != model.sha256 {
                    tracing::warn!(session = %meta.session_id, "skipping session recorded with a different model");
                    continue;
                }
                match store::replay(model.weights.clone(), &meta, &log) {
                    Ok(session) => {
                        tracing::info!(session = %meta.session_id, items = log.len(), "recovered session");
                        sessions.insert(meta.session_id.clone(), Arc::new(SessionHandle::new(meta, session)));
                    }
                    Err(e) => tracing::error!(session = %meta.session_id, error = %e, "could not replay session"),
                }
            }
        }
        Ok(Arc::new(Self { config, model, store, sessions: RwLock::new(sessions) }))
    }

    /// Loads the configured checkpoint, if any, then opens the state.
    pub fn from_config(config: ServiceConfig) -> dlvm::Result<Arc<Self>> {
        let model = config.model_path.as_deref().map(Model::load).transpose()?;
        Self::new(config, model)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().len()
    }

    fn session(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.read().get(id).cloned()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let static_dir = state.config.static_dir.clone();
    let app = Router::new()
        .route("/healthz", get(api::healthz))
        .route("/schema", get(api::schema))
        .route("/model/info", get(api::model_info))
        .route("/sessions", post(api::create_session))
        .route("/sessions/{id}/response", post(api::submit_response))
        .route("/sessions/{id}/estimates", get(api::estimates))
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Binds and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let bind = config.bind;
    let state = AppState::from_config(config)?;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(%bind, sessions = state.session_count(), "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
