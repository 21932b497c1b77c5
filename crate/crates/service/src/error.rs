use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    UndecodableImage(String),
    #[error("upload exceeds {limit} bytes")]
    ImageTooLarge { limit: usize },
    #[error("model is not loaded yet")]
    ModelNotLoaded,
    #[error("predicted and corrected are both {0}")]
    SameLabel(String),
    #[error("unknown class label {0:?}")]
    UnknownLabel(String),
    #[error("feedback storage is full")]
    StorageFull,
    #[error("{0}")]
    MalformedBatch(String),
    #[error("client_event_id {0:?} appears more than once in the batch")]
    DuplicateIdsWithinBatch(String),
    #[error("limit must be at least 1")]
    InvalidLimit,
    #[error("{0}")]
    BadRequest(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::ImageTooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            Self::ModelNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            Self::StorageFull => StatusCode::INSUFFICIENT_STORAGE,
            Self::DuplicateIdsWithinBatch(_) => StatusCode::CONFLICT,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::UndecodableImage(_) => "UndecodableImage",
            Self::ImageTooLarge { .. } => "ImageTooLarge",
            Self::ModelNotLoaded => "ModelNotLoaded",
            Self::SameLabel(_) => "SameLabel",
            Self::UnknownLabel(_) => "UnknownLabel",
            Self::StorageFull => "StorageFull",
            Self::MalformedBatch(_) => "MalformedBatch",
            Self::DuplicateIdsWithinBatch(_) => "DuplicateIdsWithinBatch",
            Self::InvalidLimit => "InvalidLimit",
            Self::BadRequest(_) => "BadRequest",
            Self::NotFound(_) => "NotFound",
            Self::Internal(_) => "Internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let Self::Internal(msg) = &self {
            tracing::error!("{msg}");
        }
        let body = ErrorBody { error: self.code().into(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}
