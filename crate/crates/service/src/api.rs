//! HTTP routes over the catalog. Bodies are JSON throughout.

use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use scenequery_core::model::{parse_query, validate_query, Finding};
use scenequery_core::{HyperParams, QuerySpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{error, info};

use crate::archive::{Archive, ArchiveUpload};
use crate::catalog::{Catalog, QueryRecord, QueryState, QueryStatus, ServiceError};

/// Uploads carry whole archives.
const BODY_LIMIT: usize = 512 * 1024 * 1024;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    /// A query document, inline or as a string.
    pub query: Value,
    #[serde(default)]
    pub params: HyperParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct FindingView {
    #[serde(flatten)]
    pub finding: Finding,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidateResponse {
    pub valid: bool,
    pub findings: Vec<FindingView>,
    /// Set when the document does not even parse.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The parsed query in canonical form.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<QuerySpec>,
}

pub fn findings_view(findings: &[Finding]) -> Vec<FindingView> {
    findings.iter().map(|f| FindingView { finding: f.clone(), message: f.to_string() }).collect()
}

/// Parses a query document given inline or as a string.
pub fn query_from_value(v: &Value) -> Result<QuerySpec, ServiceError> {
    let text = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    parse_query(&text).map_err(|e| ServiceError::MalformedQuery(e.to_string()))
}

pub fn validate_document(v: &Value) -> ValidateResponse {
    match query_from_value(v) {
        Ok(q) => {
            let report = validate_query(&q);
            ValidateResponse { valid: report.is_valid(), findings: findings_view(&report.findings), error: None, query: Some(q) }
        }
        Err(e) => ValidateResponse { valid: false, findings: Vec::new(), error: Some(e.to_string()), query: None },
    }
}

/// HTTP status and JSON body for an error; the CLI prints the same body.
pub fn error_payload(e: &ServiceError) -> (StatusCode, Value) {
    let message = e.to_string();
    let (status, code, extra) = match e {
        ServiceError::NotFound { .. } => (StatusCode::NOT_FOUND, "not_found", Value::Null),
        ServiceError::InvalidArchive(d) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_archive", json!({ "diagnostics": d })),
        ServiceError::MalformedQuery(_) => (StatusCode::BAD_REQUEST, "malformed_query", Value::Null),
        ServiceError::InvalidQuery(r) => {
            (StatusCode::UNPROCESSABLE_ENTITY, "invalid_query", json!({ "findings": findings_view(&r.findings) }))
        }
        ServiceError::InvalidParams(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_params", Value::Null),
        ServiceError::Config(_) | ServiceError::Io { .. } | ServiceError::Persist(_) => {
            (StatusCode::INTERNAL_SERVER_ERROR, "internal", Value::Null)
        }
    };
    let mut body = json!({ "error": code, "message": message });
    if let Value::Object(extra) = extra {
        body.as_object_mut().expect("object").extend(extra);
    }
    (status, body)
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, body) = error_payload(&self);
        if status.is_server_error() {
            error!(message = %self, "request failed");
        }
        (status, Json(body)).into_response()
    }
}

fn bad_body(e: serde_json::Error) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": "bad_request", "message": e.to_string() }))).into_response()
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(bytes).map_err(bad_body)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, Response> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(IntoResponse::into_response),
        Err(e) => Err((StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": "internal", "message": e.to_string() }))).into_response()),
    }
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_datasets(State(c): State<Arc<Catalog>>) -> Response {
    Json(c.list()).into_response()
}

async fn create_dataset(State(c): State<Arc<Catalog>>, bytes: Bytes) -> Response {
    let upload: ArchiveUpload = match body(&bytes) {
        Ok(u) => u,
        Err(r) => return r,
    };
    let result = blocking(move || {
        let archive = Archive::from_upload(&upload).map_err(ServiceError::InvalidArchive)?;
        c.create_dataset(upload.name.clone(), archive, upload.segment_length)
    })
    .await;
    match result {
        Ok(outcome) => (StatusCode::CREATED, Json(outcome)).into_response(),
        Err(r) => r,
    }
}

async fn get_dataset(State(c): State<Arc<Catalog>>, Path(id): Path<String>) -> Response {
    match c.describe(&id) {
        Ok(d) => Json(d).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn list_segments(State(c): State<Arc<Catalog>>, Path(id): Path<String>) -> Response {
    match c.segments(&id) {
        Ok(s) => Json(s).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn upsert_segments(State(c): State<Arc<Catalog>>, Path(id): Path<String>, bytes: Bytes) -> Response {
    let upload: ArchiveUpload = match body(&bytes) {
        Ok(u) => u,
        Err(r) => return r,
    };
    let result = blocking(move || {
        let archive = Archive::from_upload(&upload).map_err(ServiceError::InvalidArchive)?;
        c.upsert_segments(&id, archive, upload.segment_length)
    })
    .await;
    match result {
        Ok(outcome) => Json(outcome).into_response(),
        Err(r) => r,
    }
}

async fn submit_query(State(c): State<Arc<Catalog>>, Path(id): Path<String>, bytes: Bytes) -> Response {
    let req: QueryRequest = match body(&bytes) {
        Ok(r) => r,
        Err(r) => return r,
    };
    let job = match query_from_value(&req.query).and_then(|q| c.submit_query(&id, q, req.params)) {
        Ok(j) => j,
        Err(e) => return e.into_response(),
    };
    let record = QueryRecord {
        query_id: job.query_id.clone(),
        dataset_id: id,
        state: QueryState { status: QueryStatus::Running, results: None, report: None, error: None },
    };
    info!(query = %record.query_id, dataset = %record.dataset_id, "query submitted");
    tokio::task::spawn_blocking(move || job.run());
    (StatusCode::ACCEPTED, Json(record)).into_response()
}

async fn get_query(State(c): State<Arc<Catalog>>, Path(id): Path<String>) -> Response {
    match c.query(&id) {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn validate(bytes: Bytes) -> Response {
    match body::<Value>(&bytes) {
        Ok(v) => Json(validate_document(&v)).into_response(),
        Err(r) => r,
    }
}

pub fn router(catalog: Arc<Catalog>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/datasets", get(list_datasets).post(create_dataset))
        .route("/datasets/{id}", get(get_dataset))
        .route("/datasets/{id}/segments", get(list_segments).post(upsert_segments))
        .route("/datasets/{id}/queries", post(submit_query))
        .route("/queries/{id}", get(get_query))
        .route("/validate", post(validate))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(catalog)
}

/// Serves until `shutdown` resolves, then flushes the catalog.
pub async fn serve(
    catalog: Arc<Catalog>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let addr = listener.local_addr().map_err(|source| ServiceError::Io { path: "listener".into(), source })?;
    info!(%addr, "listening");
    axum::serve(listener, router(catalog.clone()))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|source| ServiceError::Io { path: addr.to_string(), source })?;
    let flushed = tokio::task::spawn_blocking(move || catalog.flush()).await;
    info!("shut down");
    flushed.unwrap_or(Ok(()))
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
