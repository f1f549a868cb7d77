//! HTTP API over a [`CurationService`].
//!
//! | method | path | response |
//! |---|---|---|
//! | GET | `/api/queue/next?prompt_id=` | next pending record, or 204 |
//! | GET | `/api/images/{id}` | image bytes |
//! | POST | `/api/decisions` | counts after appending the decision |
//! | GET | `/api/decisions` | the full audit log |
//! | GET | `/api/progress` | counts plus per-prompt breakdown |
//! | POST | `/api/finalize` | `{manifest, accepted}` |
//!
//! Errors are `{"error": {"code", "message", ...}}` with a 4xx/5xx status.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use synthvision_core::curation::{CurationError, CurationService, DecisionRequest};
use synthvision_core::imaging;
use synthvision_core::pipeline::Run;

/// Where a successful finalize writes the accepted manifest.
pub enum Finalizer {
    /// Complete the curate stage of a pipeline run.
    Run(Box<Run>),
    /// Write `accepted.jsonl` into a directory.
    Dir(PathBuf),
}

pub struct AppState {
    pub service: CurationService,
    pub finalizer: Finalizer,
}

pub type Shared = Arc<Mutex<AppState>>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/queue/next", get(next_pending))
        .route("/api/images/{id}", get(image))
        .route("/api/decisions", post(decide).get(decisions))
        .route("/api/progress", get(progress))
        .route("/api/finalize", post(finalize))
        .with_state(Arc::new(Mutex::new(state)))
}

pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": {"code": code, "message": message.into()}}),
        }
    }
}

impl From<CurationError> for ApiError {
    fn from(e: CurationError) -> Self {
        let status = match &e {
            CurationError::UnknownImage(_) => StatusCode::NOT_FOUND,
            CurationError::NotSynthetic(_) | CurationError::MissingReviewer => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            CurationError::Supersedes(_)
            | CurationError::PendingRemaining { .. }
            | CurationError::Shortfall { .. }
            | CurationError::NoSynthetics => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut err = Self::new(status, e.code(), e.to_string());
        match e {
            CurationError::Shortfall {
                accepted,
                target,
                shortfall,
            } => {
                err.body["error"]["accepted"] = accepted.into();
                err.body["error"]["target"] = target.into();
                err.body["error"]["shortfall"] = shortfall.into();
            }
            CurationError::PendingRemaining { pending } => {
                err.body["error"]["pending"] = pending.into()
            }
            _ => {}
        }
        err
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn lock(state: &Shared) -> std::sync::MutexGuard<'_, AppState> {
    state.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Deserialize)]
struct NextQuery {
    prompt_id: Option<String>,
}

async fn next_pending(State(state): State<Shared>, Query(q): Query<NextQuery>) -> Response {
    match lock(&state).service.next_pending(q.prompt_id.as_deref()) {
        Some(rec) => Json(rec).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn image(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let path = lock(&state)
        .service
        .image_path(&id)
        .ok_or_else(|| ApiError::from(CurationError::UnknownImage(id.clone())))?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "image_unreadable",
            format!("{}: {e}", path.display()),
        )
    })?;
    Ok((
        [(header::CONTENT_TYPE, imaging::content_type(&path))],
        bytes,
    )
        .into_response())
}

async fn decide(
    State(state): State<Shared>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let counts = lock(&state).service.record_decision(req)?;
    Ok(Json(counts).into_response())
}

async fn decisions(State(state): State<Shared>) -> Response {
    Json(lock(&state).service.log().to_vec()).into_response()
}

async fn progress(State(state): State<Shared>) -> Response {
    Json(lock(&state).service.progress()).into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FinalizeRequest {
    target_accepted: usize,
}

async fn finalize(
    State(state): State<Shared>,
    body: Result<Json<FinalizeRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let mut guard = lock(&state);
    let AppState { service, finalizer } = &mut *guard;
    let accepted = service.finalize(req.target_accepted)?;
    let path = match finalizer {
        Finalizer::Run(run) => run
            .finalize_curation(service, req.target_accepted)
            .map_err(|e| {
                ApiError::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "finalize_failed",
                    e.to_string(),
                )
            })?,
        Finalizer::Dir(dir) => {
            let path = dir.join(synthvision_core::pipeline::ACCEPTED_FILE);
            accepted.write(&path).map_err(|e| {
                ApiError::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "finalize_failed",
                    e.to_string(),
                )
            })?;
            path
        }
    };
    log::info!(
        "finalized {} accepted images into {}",
        accepted.len(),
        path.display()
    );
    Ok(Json(json!({"manifest": path, "accepted": accepted.len()})).into_response())
}
