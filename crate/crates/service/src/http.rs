//! HTTP+JSON binding of [`StudyService`].

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ServiceError;
use crate::service::{CreateSession, StudyService, SubmitResponse};
use crate::session::Gate;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut body = json!({
            "error": {
                "code": self.code(),
                "message": self.to_string(),
            }
        });
        if let ServiceError::OutOfOrder { expected } = &self {
            body["error"]["expected_question"] = json!(expected);
        }
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<StudyService>;

/// Runs a blocking service call off the async workers; every mutation ends in
/// an fsync.
async fn blocking<T, F>(service: Shared, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&StudyService) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ServiceError::BadRequest(format!("worker failed: {e}")))?
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

async fn create_session(
    State(service): State<Shared>,
    body: axum::body::Bytes,
) -> Result<impl IntoResponse, ServiceError> {
    let request: CreateSession = parse_json(&body)?;
    let created = blocking(service, move |s| s.create_session(request)).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn next_question(
    State(service): State<Shared>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(service.next_question(&id)?))
}

async fn submit_response(
    State(service): State<Shared>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<impl IntoResponse, ServiceError> {
    let response: SubmitResponse = parse_json(&body)?;
    let ack = blocking(service, move |s| s.submit_response(&id, response)).await?;
    Ok(Json(ack))
}

async fn record_gate(
    State(service): State<Shared>,
    Path((id, gate)): Path<(String, String)>,
    body: axum::body::Bytes,
) -> Result<impl IntoResponse, ServiceError> {
    let gate: Gate = gate.parse().map_err(ServiceError::BadRequest)?;
    let payload: Value = if body.is_empty() {
        json!({})
    } else {
        parse_json(&body)?
    };
    let outcome = blocking(service, move |s| s.record_gate(&id, gate, payload)).await?;
    Ok(Json(outcome))
}

#[derive(Debug, Default, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    include_partial: bool,
}

async fn export(
    State(service): State<Shared>,
    Path(study): Path<String>,
    Query(query): Query<ExportQuery>,
) -> Result<impl IntoResponse, ServiceError> {
    let bytes = blocking(service, move |s| {
        s.export_bytes(&study, query.include_partial)
    })
    .await?;
    Ok((
        [(
            header::CONTENT_TYPE,
            HeaderValue::from_static("application/x-ndjson"),
        )],
        bytes,
    ))
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn asset(
    State(service): State<Shared>,
    Path(token): Path<String>,
) -> Result<Response, ServiceError> {
    let path = service.asset_path(&token)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ServiceError::AssetNotFound(token))?;
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, content_type(&path))
        .header(header::CACHE_CONTROL, "no-store")
        .body(Body::from(bytes))
        .expect("static headers are valid"))
}

pub fn router(service: Arc<StudyService>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_question))
        .route("/sessions/{id}/responses", post(submit_response))
        .route("/sessions/{id}/gates/{gate}", post(record_gate))
        .route("/studies/{id}/export", get(export))
        .route("/assets/{token}", get(asset))
        .with_state(service)
}

/// Serves the API on `listener` until Ctrl-C.
pub async fn serve(
    service: Arc<StudyService>,
    listener: tokio::net::TcpListener,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
