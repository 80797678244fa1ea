//! HTTP API over the rating-study service.

use crate::error::{CliError, CliResult};
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mcgan_core::evaluation::Truth;
use mcgan_core::vtt::VttService;
use mcgan_core::Error;
use serde::Deserialize;
use serde_json::json;
use std::path::Path;
use std::sync::{Arc, Mutex};
use tower_http::services::ServeDir;

type Shared = Arc<Mutex<VttService>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub rater_id: String,
    pub test_id: u8,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Answer {
    pub item_id: String,
    pub answer: Truth,
}

pub struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            Error::Sequencing(_) => StatusCode::CONFLICT,
            Error::Capacity(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({ "error": { "code": self.0.code(), "message": self.0.to_string() } });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn with<T>(state: &Shared, f: impl FnOnce(&mut VttService) -> mcgan_core::Result<T>) -> ApiResult<T> {
    let mut svc = state.lock().unwrap_or_else(|p| p.into_inner());
    f(&mut svc).map(Json).map_err(ApiError)
}

async fn create(
    State(s): State<Shared>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<mcgan_core::vtt::SessionInfo>), ApiError> {
    let info = with(&s, |v| v.create_session(&req.rater_id, req.test_id))?;
    Ok((StatusCode::CREATED, info))
}

async fn info(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<mcgan_core::vtt::SessionInfo> {
    with(&s, |v| v.session_info(&id))
}

async fn next(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<mcgan_core::vtt::NextItem> {
    with(&s, |v| v.next_item(&id))
}

async fn answer(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(a): Json<Answer>,
) -> ApiResult<mcgan_core::vtt::SubmitAck> {
    with(&s, |v| v.submit_answer(&id, &a.item_id, a.answer))
}

async fn report(
    State(s): State<Shared>,
    UrlPath(test_id): UrlPath<u8>,
) -> ApiResult<mcgan_core::evaluation::VttTable> {
    with(&s, |v| v.report(test_id))
}

/// Routes under `/sessions` and `/reports`, with `static_dir` served for
/// everything else when given.
pub fn router(service: VttService, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(info))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/answers", post(answer))
        .route("/reports/{test_id}", get(report))
        .with_state(Arc::new(Mutex::new(service)));
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> CliResult<()> {
    axum::serve(listener, app).await.map_err(|e| CliError::Server(e.to_string()))
}
