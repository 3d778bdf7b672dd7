use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dash_core::{Error, ErrorKind};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub type ApiResult<T> = std::result::Result<T, ApiError>;

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub detail: Value,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_owned(),
                message: message.into(),
                detail: Value::Null,
            },
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.body.detail = detail;
        self
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id}"))
            .with_detail(serde_json::json!({ "kind": what, "id": id }))
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match &e {
            Error::UnknownId(id) => Self::not_found("image", id),
            Error::DuplicateId(_) => Self::conflict(message),
            Error::MissingPrediction(_) | Error::IdMismatch(_) | Error::ShapeMismatch { .. } => {
                Self::invalid(message)
            }
            _ => match e.kind() {
                ErrorKind::InvalidInput => Self::invalid(message),
                ErrorKind::Compute => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "compute", message),
                ErrorKind::Data => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "data", message),
            },
        }
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        Self::internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", self.status.as_u16(), self.body.code, self.body.message)
    }
}

impl std::error::Error for ApiError {}
