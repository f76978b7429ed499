//! HTTP surface: the correction endpoint and exclusion administration.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use unlearn_core::store::parse_drafts;
use unlearn_core::{
    CorrectionPipeline, ExclusionRecord, ExclusionSet, PipelineError, RecordDraft, StoreError,
};

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<CorrectionPipeline>,
    pub max_batch: usize,
}

impl AppState {
    fn exclusions(&self) -> &Arc<ExclusionSet> {
        self.pipeline.exclusions()
    }
}

/// Structured error body: `{"error": {"code", "message", "field"?}}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "invalid_request",
            message: message.into(),
            field: Some(field.into()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::EmptyBatch => ApiError::invalid("records", message),
            StoreError::EmptyField { index, field } => {
                ApiError::invalid(format!("[{index}].{field}"), message)
            }
            StoreError::Parse { line, .. } => ApiError::invalid(format!("line {line}"), message),
            StoreError::DuplicateId(id) => ApiError {
                status: StatusCode::CONFLICT,
                code: "duplicate_id",
                message,
                field: Some(id),
            },
            StoreError::UnknownId(id) => ApiError {
                status: StatusCode::NOT_FOUND,
                code: "unknown_id",
                message,
                field: Some(id),
            },
            StoreError::EmptySnapshot | StoreError::Io { .. } => ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                code: "store_error",
                message,
                field: None,
            },
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            PipelineError::Config(_) => (StatusCode::SERVICE_UNAVAILABLE, "not_ready"),
            PipelineError::Backend { .. } => (StatusCode::BAD_GATEWAY, "backend_error"),
            PipelineError::Prompt(_)
            | PipelineError::Parse { .. }
            | PipelineError::MissingRevision => (StatusCode::BAD_GATEWAY, "corrector_error"),
        };
        ApiError {
            status,
            code,
            message,
            field: Some(e.phase().to_string()),
        }
    }
}

fn json_body(bytes: &[u8]) -> Result<Value, ApiError> {
    serde_json::from_slice(bytes)
        .map_err(|e| ApiError::invalid("body", format!("invalid JSON: {e}")))
}

fn required_string(obj: &Value, field: &str, path: &str) -> Result<String, ApiError> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(ApiError::invalid(path, format!("{path} is required"))),
        Some(Value::String(s)) if s.trim().is_empty() => {
            Err(ApiError::invalid(path, format!("{path} must be non-empty")))
        }
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ApiError::invalid(path, format!("{path} must be a string"))),
    }
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a serde_json::Map<String, Value>, ApiError> {
    v.as_object()
        .ok_or_else(|| ApiError::invalid(path, format!("{path} must be a JSON object")))
}

async fn correct(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let v = json_body(&body)?;
    object(&v, "body")?;
    let query = required_string(&v, "query", "query")?;
    let outcome = state.pipeline.correct(&query).await?;
    Ok(Json(outcome).into_response())
}

fn draft_from_value(v: &Value, index: usize) -> Result<RecordDraft, ApiError> {
    let at = |f: &str| format!("[{index}].{f}");
    object(v, &format!("[{index}]"))?;
    let id = match v.get("id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(ApiError::invalid(
                at("id"),
                format!("{} must be a string", at("id")),
            ))
        }
    };
    let tags = match v.get("tags") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|t| t.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| {
                ApiError::invalid(
                    at("tags"),
                    format!("{} must be an array of strings", at("tags")),
                )
            })?,
        Some(_) => {
            return Err(ApiError::invalid(
                at("tags"),
                format!("{} must be an array of strings", at("tags")),
            ))
        }
    };
    Ok(RecordDraft {
        id,
        question: required_string(v, "question", &at("question"))?,
        answer: required_string(v, "answer", &at("answer"))?,
        tags,
    })
}

/// Accepts a JSON array (or `{"records": [...]}`) or, with an NDJSON
/// content type, one record per line.
fn parse_batch(headers: &HeaderMap, body: &[u8]) -> Result<Vec<RecordDraft>, ApiError> {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    if content_type.contains("ndjson") || content_type.contains("jsonl") {
        let text = std::str::from_utf8(body)
            .map_err(|_| ApiError::invalid("body", "body must be UTF-8"))?;
        return Ok(parse_drafts(text)?);
    }
    let v = json_body(body)?;
    let items = match &v {
        Value::Array(items) => items,
        Value::Object(o) => match o.get("records") {
            Some(Value::Array(items)) => items,
            _ => return Err(ApiError::invalid("records", "records must be an array")),
        },
        _ => return Err(ApiError::invalid("body", "expected an array of records")),
    };
    items
        .iter()
        .enumerate()
        .map(|(i, v)| draft_from_value(v, i))
        .collect()
}

#[derive(Debug, Serialize)]
struct MutationResponse {
    store_version: u64,
    record_count: usize,
    index_generation: u64,
    changed: usize,
}

async fn add_exclusions(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let drafts = parse_batch(&headers, &body)?;
    if drafts.len() > state.max_batch {
        return Err(ApiError {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            code: "batch_too_large",
            message: format!(
                "batch of {} exceeds the limit of {}",
                drafts.len(),
                state.max_batch
            ),
            field: Some("records".into()),
        });
    }
    let exclusions = state.exclusions().clone();
    let before = exclusions.version().record_count;
    let version = tokio::task::spawn_blocking(move || exclusions.add(&drafts))
        .await
        .expect("store writer panicked")?;
    let generation = state.exclusions().current().number;
    Ok((
        StatusCode::CREATED,
        Json(MutationResponse {
            store_version: version.version,
            record_count: version.record_count,
            index_generation: generation,
            changed: version.record_count - before,
        }),
    )
        .into_response())
}

async fn remove_exclusions(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let v = json_body(&body)?;
    object(&v, "body")?;
    let ids: Vec<String> = match v.get("ids") {
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, x)| match x.as_str() {
                Some(s) if !s.is_empty() => Ok(s.to_string()),
                _ => Err(ApiError::invalid(
                    format!("ids[{i}]"),
                    "ids must be non-empty strings",
                )),
            })
            .collect::<Result<_, _>>()?,
        _ => {
            return Err(ApiError::invalid(
                "ids",
                "ids is required and must be an array",
            ))
        }
    };
    let exclusions = state.exclusions().clone();
    let n = ids.len();
    let version = tokio::task::spawn_blocking(move || exclusions.remove(&ids))
        .await
        .expect("store writer panicked")?;
    Ok(Json(MutationResponse {
        store_version: version.version,
        record_count: version.record_count,
        index_generation: state.exclusions().current().number,
        changed: n,
    })
    .into_response())
}

#[derive(Debug, Deserialize)]
struct ListFilter {
    tag: Option<String>,
    q: Option<String>,
}

#[derive(Debug, Serialize)]
struct ListResponse<'a> {
    store_version: u64,
    index_generation: u64,
    records: Vec<&'a ExclusionRecord>,
}

async fn list_exclusions(
    State(state): State<AppState>,
    Query(filter): Query<ListFilter>,
) -> Response {
    let generation = state.exclusions().current();
    let needle = filter.q.as_deref().map(str::to_lowercase);
    let records = generation
        .store
        .records()
        .filter(|r| filter.tag.as_ref().is_none_or(|t| r.tags.contains(t)))
        .filter(|r| {
            needle.as_ref().is_none_or(|n| {
                r.question.to_lowercase().contains(n) || r.answer.to_lowercase().contains(n)
            })
        })
        .collect();
    Json(ListResponse {
        store_version: generation.store.version().version,
        index_generation: generation.number,
        records,
    })
    .into_response()
}

async fn healthz(State(state): State<AppState>) -> Response {
    let generation = state.exclusions().current();
    Json(json!({
        "status": "ok",
        "store_version": generation.store.version().version,
        "index_generation": generation.number,
    }))
    .into_response()
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        message: "no such route".into(),
        field: None,
    }
}

pub fn router(state: AppState, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/v1/correct", post(correct))
        .route(
            "/admin/exclusions",
            post(add_exclusions)
                .delete(remove_exclusions)
                .get(list_exclusions),
        )
        .route("/healthz", get(healthz))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

/// Serves until ctrl-c or SIGTERM, then stops accepting and drains in-flight
/// requests.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown_signal())
        .await
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
        {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down, draining in-flight requests");
}
