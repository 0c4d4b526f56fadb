use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::Json;
use dlvm::{
    FamilyParams, LatentGaussian, MiConfig, Outcome, Phase, Session, SessionConfig, Stimulus, TaskId,
    ThetaVector, TrialRecord,
};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::ApiError;
use crate::store::SessionMeta;
use crate::AppState;

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// The item a client must answer next. `index` is the position in the
/// session, so repeats of the same task inside a block are distinguishable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub index: usize,
    pub task_id: TaskId,
    pub stimulus: Stimulus,
}

/// What the client believes it answered.
pub type ItemEcho = PendingItem;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub participant_label: String,
    pub budget: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub seed: u64,
    pub budget: usize,
    pub phase: Phase,
    pub first_item: PendingItem,
    pub items_remaining: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub item_echo: ItemEcho,
    pub outcome: serde_json::Value,
    #[serde(default)]
    pub client_latency_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub accepted_index: usize,
    pub done: bool,
    pub phase: Phase,
    pub next_item: Option<PendingItem>,
    pub items_remaining: usize,
    pub estimates_summary: BTreeMap<TaskId, FamilyParams>,
}

/// A committed, immutable view of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatesResponse {
    pub session_id: String,
    pub participant_label: String,
    pub phase: Phase,
    pub budget: usize,
    pub seed: u64,
    pub items_delivered: usize,
    pub items_remaining: usize,
    pub pending_item: Option<PendingItem>,
    pub theta: ThetaVector,
    pub parameters: BTreeMap<TaskId, FamilyParams>,
    pub q: LatentGaussian,
    /// Best mutual-information score per task behind the pending choice.
    pub mi_snapshot: BTreeMap<String, f64>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

pub(crate) struct SessionHandle {
    meta: SessionMeta,
    /// Single in-flight update per session.
    exec: tokio::sync::Mutex<Session>,
    snapshot: RwLock<Arc<EstimatesResponse>>,
}

fn parameters(theta: &ThetaVector) -> BTreeMap<TaskId, FamilyParams> {
    TaskId::ALL.into_iter().map(|t| (t, theta.params(t))).collect()
}

fn pending_of(session: &Session) -> Option<PendingItem> {
    session.pending().map(|c| PendingItem {
        index: session.state().items_delivered,
        task_id: c.task_id,
        stimulus: c.stimulus,
    })
}

fn snapshot_of(meta: &SessionMeta, session: &Session, updated_ms: u64) -> EstimatesResponse {
    let state = session.state();
    let theta = session.estimate();
    EstimatesResponse {
        session_id: meta.session_id.clone(),
        participant_label: meta.participant_label.clone(),
        phase: state.phase,
        budget: state.budget,
        seed: state.seed,
        items_delivered: state.items_delivered,
        items_remaining: session.items_remaining(),
        pending_item: pending_of(session),
        parameters: parameters(&theta),
        theta,
        q: state.q.clone(),
        mi_snapshot: session.pending_scores(),
        created_ms: meta.created_ms,
        updated_ms,
    }
}

impl SessionHandle {
    pub(crate) fn new(meta: SessionMeta, session: Session) -> Self {
        let snap = snapshot_of(&meta, &session, meta.created_ms);
        Self { meta, exec: tokio::sync::Mutex::new(session), snapshot: RwLock::new(Arc::new(snap)) }
    }

    fn snapshot(&self) -> Arc<EstimatesResponse> {
        self.snapshot.read().clone()
    }
}

pub(crate) async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_loaded": state.model.is_some(),
        "sessions": state.session_count(),
    }))
}

pub(crate) async fn schema() -> Json<serde_json::Value> {
    Json(crate::schema::api_schema())
}

pub(crate) async fn model_info(State(state): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ApiError> {
    let model = state.model.as_ref().ok_or_else(ApiError::no_model)?;
    let ck = &model.checkpoint;
    Ok(Json(json!({
        "checkpoint_sha256": model.sha256,
        "d": ck.d,
        "D": ck.output_dim,
        "layer_sizes": ck.layer_sizes,
        "tasks": dlvm::TaskRegistry::standard(),
        "update_iterations": state.config.update_iterations,
        "final_update_iterations": state.config.final_update_iterations,
    })))
}

fn parse_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(b)| b).map_err(|e| match e {
        JsonRejection::JsonDataError(e) => ApiError::validation(e.body_text()),
        other => ApiError::bad_request(other.body_text()),
    })
}

pub(crate) async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let req = parse_body(body)?;
    let model = state.model.as_ref().ok_or_else(ApiError::no_model)?;
    let id = uuid::Uuid::new_v4();
    let seed = req.seed.unwrap_or_else(|| id.as_u64_pair().0);
    let cfg = SessionConfig {
        mi: MiConfig { seed, update_iterations: state.config.update_iterations, ..state.config.mi },
        budget: req.budget.unwrap_or(state.config.default_budget),
        final_update_iterations: Some(state.config.final_update_iterations),
        ..Default::default()
    };
    let session = Session::start(model.weights.clone(), cfg)?;
    let meta = SessionMeta {
        session_id: id.simple().to_string(),
        participant_label: req.participant_label,
        created_ms: now_ms(),
        model_sha256: model.sha256.clone(),
        config: cfg,
    };
    state.store.create(&meta)?;
    let first_item = pending_of(&session).ok_or_else(|| ApiError::internal("new session has no item"))?;
    let resp = CreateSessionResponse {
        session_id: meta.session_id.clone(),
        seed,
        budget: cfg.budget,
        phase: session.state().phase,
        first_item,
        items_remaining: session.items_remaining(),
    };
    let handle = Arc::new(SessionHandle::new(meta, session));
    state.sessions.write().insert(resp.session_id.clone(), handle);
    Ok((StatusCode::CREATED, Json(resp)))
}

pub(crate) async fn submit_response(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<SubmitRequest>, JsonRejection>,
) -> Result<Json<SubmitResponse>, ApiError> {
    let handle = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let req = parse_body(body)?;
    let mut session = handle.exec.lock().await;

    let pending = pending_of(&session);
    if pending != Some(req.item_echo) {
        return Err(ApiError::conflict(
            match pending {
                Some(_) => "item_echo does not match the pending item",
                None => "session is done",
            },
            json!({ "pending_item": pending, "items_delivered": session.state().items_delivered }),
        ));
    }
    let outcome: Outcome = serde_json::from_value(req.outcome.clone())
        .map_err(|_| ApiError::validation(format!("outcome must be a number or a boolean, got {}", req.outcome)))?;
    TrialRecord::new(req.item_echo.task_id, req.item_echo.stimulus, outcome, req.item_echo.index as u64).validate()?;

    // The update is CPU-bound; run it off the async workers on a copy and
    // commit only after the log line is durable.
    let mut next = session.clone();
    let record = tokio::task::spawn_blocking(move || next.submit(outcome).map(|r| r.clone()).map(|r| (next, r)))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let (next, record) = record?;
    state.store.append(&id, &record)?;
    *session = next;

    let snap = snapshot_of(&handle.meta, &session, now_ms());
    let resp = SubmitResponse {
        accepted_index: record.index,
        done: session.is_done(),
        phase: snap.phase,
        next_item: snap.pending_item,
        items_remaining: snap.items_remaining,
        estimates_summary: snap.parameters.clone(),
    };
    *handle.snapshot.write() = Arc::new(snap);
    Ok(Json(resp))
}

pub(crate) async fn estimates(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<EstimatesResponse>, ApiError> {
    let handle = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json((*handle.snapshot()).clone()))
}
