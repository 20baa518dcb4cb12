//! JSON HTTP API over run directories and the constraint store.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sicql::obs::{LabelError, RunStore, StoreError};
use sicql::store::ConstraintStore;

pub struct AppState {
    pub runs: RunStore,
    pub constraints: ConstraintStore,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl From<LabelError> for ApiError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            LabelError::Conflict(_) => ApiError::new(StatusCode::CONFLICT, "already_labeled", e.to_string()),
            LabelError::Rejected(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "not_labelable", e.to_string()),
            LabelError::Store(s) => s.into(),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = State<Arc<AppState>>;

async fn list_runs(State(s): Shared) -> ApiResult<impl Serialize> {
    Ok(Json(s.runs.list_runs()?))
}

async fn get_run(State(s): Shared, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    Ok(Json(s.runs.run(&id)?))
}

async fn run_metrics(State(s): Shared, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    Ok(Json(s.runs.metrics(&id)?))
}

#[derive(Deserialize)]
struct TuplesQuery {
    flagged: Option<bool>,
}

async fn run_tuples(State(s): Shared, Path(id): Path<String>, Query(q): Query<TuplesQuery>) -> ApiResult<impl Serialize> {
    Ok(Json(s.runs.tuples(&id, q.flagged)?))
}

#[derive(Deserialize)]
struct LineageQuery {
    run: Option<String>,
}

async fn lineage(State(s): Shared, Path(tuple): Path<String>, Query(q): Query<LineageQuery>) -> ApiResult<impl Serialize> {
    let run = match q.run {
        Some(r) => r,
        None => s.runs.run_for_tuple(&tuple)?,
    };
    Ok(Json(s.runs.lineage(&run, &tuple)?))
}

#[derive(Deserialize)]
struct NextLabelQuery {
    run: Option<String>,
    constraint: Option<String>,
}

/// The next unlabeled stochastic invocation, or `null` when none remain.
async fn next_label(State(s): Shared, Query(q): Query<NextLabelQuery>) -> ApiResult<impl Serialize> {
    Ok(Json(s.runs.next_label(q.run.as_deref(), q.constraint.as_deref())?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    invocation_id: String,
    true_label: bool,
}

async fn submit_label(State(s): Shared, body: Bytes) -> ApiResult<impl Serialize> {
    let b: LabelBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?;
    Ok(Json(s.runs.submit_label(&b.invocation_id, b.true_label)?))
}

#[derive(Deserialize)]
struct RecommendQuery {
    q: String,
    k: Option<usize>,
}

async fn recommend(State(s): Shared, Query(q): Query<RecommendQuery>) -> ApiResult<impl Serialize> {
    Ok(Json(s.constraints.recommend(&q.q, q.k.unwrap_or(5), None)))
}

async fn conflicts(State(s): Shared) -> ApiResult<impl Serialize> {
    Ok(Json(s.constraints.conflicts(&[], None)))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/metrics", get(run_metrics))
        .route("/runs/{id}/tuples", get(run_tuples))
        .route("/tuples/{id}/lineage", get(lineage))
        .route("/labels/next", get(next_label))
        .route("/labels", axum::routing::post(submit_label))
        .route("/constraints/recommend", get(recommend))
        .route("/constraints/conflicts", get(conflicts))
        .fallback(fallback)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    axum::serve(listener, router(state)).await
}
