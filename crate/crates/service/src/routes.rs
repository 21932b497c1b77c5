use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use wastewise_core::dataset::decode_bytes;
use wastewise_core::export::ArtifactMetadata;
use wastewise_core::rewards::{AppendResult, EventType, RewardsError, UserSummary};
use wastewise_core::{ClassLabel, ClassificationResult, LedgerEvent};

use crate::error::ApiError;
use crate::feedback::{FeedbackError, FeedbackRecord, NewFeedback};
use crate::AppState;

pub const USER_HEADER: &str = "x-user-id";
pub const DEFAULT_LEADERBOARD_LIMIT: usize = 10;

/// Multipart framing allowance on top of the image limit.
const FORM_OVERHEAD: usize = 64 * 1024;

pub fn router(state: Arc<AppState>) -> Router {
    let body_limit = state.max_upload_bytes + FORM_OVERHEAD;
    Router::new()
        .route("/healthz", get(health))
        .route("/api/v1/classify", post(classify))
        .route("/api/v1/feedback", post(feedback))
        .route("/api/v1/feedback/{id}", get(feedback_record))
        .route("/api/v1/feedback/{id}/image", get(feedback_image))
        .route("/api/v1/sync", post(sync))
        .route("/api/v1/leaderboard", get(leaderboard))
        .route("/api/v1/users/{id}/summary", get(user_summary))
        .route("/api/v1/factors", get(factors))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub artifact_metadata: Option<ArtifactMetadata>,
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.model() {
        Some(m) => Json(Health { status: "ok".into(), model_loaded: true, artifact_metadata: Some(m.metadata().clone()) })
            .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health { status: "loading".into(), model_loaded: false, artifact_metadata: None }),
        )
            .into_response(),
    }
}

fn user_id(headers: &HeaderMap) -> Result<Option<String>, ApiError> {
    match headers.get(USER_HEADER) {
        None => Ok(None),
        Some(v) => {
            let s = v.to_str().map_err(|_| ApiError::BadRequest("X-User-Id must be visible ASCII".into()))?.trim();
            Ok((!s.is_empty()).then(|| s.to_string()))
        }
    }
}

#[derive(Default)]
struct Upload {
    image: Option<Bytes>,
    fields: HashMap<String, String>,
}

async fn read_upload(form: Result<Multipart, MultipartRejection>, limit: usize) -> Result<Upload, ApiError> {
    let mut form = form.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let multipart_err = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::ImageTooLarge { limit }
        } else {
            ApiError::BadRequest(e.body_text())
        }
    };
    let mut upload = Upload::default();
    while let Some(mut field) = form.next_field().await.map_err(multipart_err)? {
        let name = field.name().unwrap_or_default().to_string();
        if name == "image" {
            let mut buf = Vec::new();
            while let Some(chunk) = field.chunk().await.map_err(multipart_err)? {
                buf.extend_from_slice(&chunk);
                if buf.len() > limit {
                    return Err(ApiError::ImageTooLarge { limit });
                }
            }
            upload.image = Some(buf.into());
        } else {
            let text = field.text().await.map_err(multipart_err)?;
            upload.fields.insert(name, text.trim().to_string());
        }
    }
    Ok(upload)
}

fn ledger_err(e: RewardsError) -> ApiError {
    match e {
        RewardsError::InvalidEvent(m) => ApiError::MalformedBatch(m),
        other => ApiError::Internal(other.to_string()),
    }
}

fn join_err(e: tokio::task::JoinError) -> ApiError {
    ApiError::Internal(format!("worker task failed: {e}"))
}

async fn classify(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    form: Result<Multipart, MultipartRejection>,
) -> Result<Json<ClassificationResult>, ApiError> {
    let model = state.model().ok_or(ApiError::ModelNotLoaded)?;
    let user = user_id(&headers)?;
    let upload = read_upload(form, state.max_upload_bytes).await?;
    let bytes = upload.image.ok_or_else(|| ApiError::BadRequest("missing multipart field `image`".into()))?;
    let probs = tokio::task::spawn_blocking(move || {
        let image = decode_bytes(&bytes).map_err(|e| ApiError::UndecodableImage(e.to_string()))?;
        model.predict(&model.prepare(&image)).map_err(|e| ApiError::Internal(e.to_string()))
    })
    .await
    .map_err(join_err)??;

    let event_id = uuid::Uuid::new_v4().to_string();
    let mut points = 0;
    if let Some(user) = user {
        let event = LedgerEvent::new(
            user,
            event_id.clone(),
            EventType::ClassifyConfirmed,
            probs.label(),
            Utc::now(),
            &state.table,
            &state.points,
        );
        points = event.points;
        state.ledger.append(event).map_err(ledger_err)?;
    }
    Ok(Json(ClassificationResult::assemble(event_id, &probs, &state.suggestions, &state.table, points)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackResponse {
    #[serde(flatten)]
    pub record: FeedbackRecord,
    pub points_awarded: u64,
    pub factor_table_version: String,
}

fn label_field(upload: &Upload, name: &str) -> Result<ClassLabel, ApiError> {
    let raw = upload.fields.get(name).ok_or_else(|| ApiError::BadRequest(format!("missing field `{name}`")))?;
    raw.parse().map_err(|_| ApiError::UnknownLabel(raw.clone()))
}

async fn feedback(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    form: Result<Multipart, MultipartRejection>,
) -> Result<Json<FeedbackResponse>, ApiError> {
    let header_user = user_id(&headers)?;
    let upload = read_upload(form, state.max_upload_bytes).await?;
    let predicted = label_field(&upload, "predicted")?;
    let corrected = label_field(&upload, "corrected")?;
    if predicted == corrected {
        return Err(ApiError::SameLabel(predicted.to_string()));
    }
    let event_id = upload.fields.get("event_id").filter(|s| !s.is_empty()).cloned();
    let user = header_user.or_else(|| upload.fields.get("user_id").filter(|s| !s.is_empty()).cloned());
    let bytes = upload.image.ok_or_else(|| ApiError::BadRequest("missing multipart field `image`".into()))?;

    let store = state.clone();
    let record = tokio::task::spawn_blocking(move || {
        let format = image::guess_format(&bytes).map_err(|e| ApiError::UndecodableImage(e.to_string()))?;
        decode_bytes(&bytes).map_err(|e| ApiError::UndecodableImage(e.to_string()))?;
        let extension = format.extensions_str().first().copied().unwrap_or("img");
        store
            .feedback
            .submit(NewFeedback { image: &bytes, extension, predicted, corrected, user_id: user, event_id })
            .map_err(|e| match e {
                FeedbackError::StorageFull => ApiError::StorageFull,
                FeedbackError::SameLabel(l) => ApiError::SameLabel(l.to_string()),
                other => ApiError::Internal(other.to_string()),
            })
    })
    .await
    .map_err(join_err)??;

    let mut points = 0;
    if let Some(user) = &record.user_id {
        let event = LedgerEvent::new(
            user.clone(),
            record.feedback_id.clone(),
            EventType::FeedbackSubmitted,
            corrected,
            record.received_at,
            &state.table,
            &state.points,
        );
        points = event.points;
        state.ledger.append(event).map_err(ledger_err)?;
    }
    Ok(Json(FeedbackResponse { record, points_awarded: points, factor_table_version: state.table.version.clone() }))
}

async fn feedback_record(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<FeedbackRecord>, ApiError> {
    state.feedback.get(&id).map(Json).ok_or_else(|| ApiError::NotFound(format!("feedback {id}")))
}

async fn feedback_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let record = state.feedback.get(&id).ok_or_else(|| ApiError::NotFound(format!("feedback {id}")))?;
    let path = state.feedback.image_path(&record);
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
    let mime = image::ImageFormat::from_path(&path).map(|f| f.to_mime_type()).unwrap_or("application/octet-stream");
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// An event recorded on a client, possibly while offline. Points and carbon
/// are always recomputed server-side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEvent {
    pub client_event_id: String,
    #[serde(rename = "type")]
    pub kind: EventType,
    pub label: ClassLabel,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncBatch {
    pub user_id: String,
    pub events: Vec<ClientEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncResponse {
    pub applied: usize,
    pub duplicates: usize,
    pub total_points: u64,
    pub total_carbon_g: f64,
}

async fn sync(
    State(state): State<Arc<AppState>>,
    batch: Result<Json<SyncBatch>, JsonRejection>,
) -> Result<Json<SyncResponse>, ApiError> {
    let Json(batch) = batch.map_err(|e| ApiError::MalformedBatch(e.body_text()))?;
    let user = batch.user_id.trim();
    if user.is_empty() {
        return Err(ApiError::MalformedBatch("user_id must be non-empty".into()));
    }
    let mut seen = HashSet::new();
    for e in &batch.events {
        if e.client_event_id.is_empty() {
            return Err(ApiError::MalformedBatch("client_event_id must be non-empty".into()));
        }
        if !seen.insert(e.client_event_id.as_str()) {
            return Err(ApiError::DuplicateIdsWithinBatch(e.client_event_id.clone()));
        }
    }
    let events = batch
        .events
        .iter()
        .map(|e| LedgerEvent::new(user, e.client_event_id.clone(), e.kind, e.label, e.timestamp, &state.table, &state.points))
        .collect();
    let results = state.ledger.append_batch(events).map_err(ledger_err)?;
    let applied = results.iter().filter(|r| **r == AppendResult::Applied).count();
    let summary = state.ledger.summary(user);
    Ok(Json(SyncResponse {
        applied,
        duplicates: results.len() - applied,
        total_points: summary.total_points,
        total_carbon_g: summary.total_carbon_g,
    }))
}

#[derive(Debug, Deserialize)]
struct LeaderboardQuery {
    limit: Option<i64>,
}

async fn leaderboard(
    State(state): State<Arc<AppState>>,
    query: Result<Query<LeaderboardQuery>, QueryRejection>,
) -> Result<Json<Vec<UserSummary>>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let limit = match q.limit {
        None => DEFAULT_LEADERBOARD_LIMIT,
        Some(n) if n < 1 => return Err(ApiError::InvalidLimit),
        Some(n) => usize::try_from(n).unwrap_or(usize::MAX),
    };
    state.ledger.leaderboard(limit).map(Json).map_err(|_| ApiError::InvalidLimit)
}

async fn user_summary(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Json<UserSummary> {
    Json(state.ledger.summary(&id))
}

async fn factors(State(state): State<Arc<AppState>>) -> Json<wastewise_core::CarbonFactorTable> {
    Json(state.table.clone())
}
