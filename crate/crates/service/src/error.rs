use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use prismlike_core::{AnalyzerError, CollectorError, StoreError};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_ENVIRONMENT: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Collector(#[from] CollectorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn store_is_usage(e: &StoreError) -> bool {
    matches!(e, StoreError::InvalidBinding { .. } | StoreError::UnknownTemplate(_) | StoreError::UnknownTable(_))
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Collector(CollectorError::Config(_)) => EXIT_USAGE,
            CliError::Collector(CollectorError::Privilege(_) | CollectorError::ProbeLoad(_)) => EXIT_ENVIRONMENT,
            CliError::Store(e) | CliError::Analyzer(AnalyzerError::Store(e)) if store_is_usage(e) => EXIT_USAGE,
            CliError::Analyzer(AnalyzerError::InvalidKpi(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

/// An error response: the status and a JSON body `{"error": message}`.
#[derive(Debug, Error)]
#[error("{status}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownTemplate(_) | StoreError::UnknownTable(_) => StatusCode::NOT_FOUND,
            StoreError::InvalidBinding { .. } => StatusCode::BAD_REQUEST,
            StoreError::ReadOnly => StatusCode::FORBIDDEN,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<AnalyzerError> for ApiError {
    fn from(e: AnalyzerError) -> Self {
        match e {
            AnalyzerError::Store(e) => e.into(),
            other => ApiError::bad_request(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}
