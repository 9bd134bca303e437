use std::path::Path;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use rentledger_core::api::ErrorBody;
use rentledger_core::consensus::NetworkError;
use rentledger_core::iot::IotError;
use rentledger_core::ledger::TxError;
use rentledger_core::market::QueryError;
use rentledger_core::persist::PersistError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    /// A transaction that would fail on chain.
    #[error(transparent)]
    Rejected(#[from] TxError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Iot(#[from] IotError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadConfig(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

impl ServiceError {
    pub fn io(path: &Path, e: impl ToString) -> Self {
        ServiceError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        }
    }

    pub fn code(&self) -> &str {
        match self {
            ServiceError::Rejected(e) => e.code(),
            ServiceError::Network(e) => e.code(),
            ServiceError::Persist(e) => e.code(),
            ServiceError::Iot(e) => e.code(),
            ServiceError::Query(_) => "BadFilter",
            ServiceError::NotFound(_) => "NotFound",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Conflict(_) => "Conflict",
            ServiceError::BadConfig(_) => "BadConfig",
            ServiceError::Io { .. } => "IoError",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Rejected(_) | ServiceError::Iot(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Network(NetworkError::UnknownNode(_)) | ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Network(NetworkError::PermissionDenied) => StatusCode::FORBIDDEN,
            ServiceError::Network(NetworkError::AlreadyJoined(_)) | ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Network(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Persist(PersistError::Corrupt(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Persist(_) | ServiceError::Io { .. } | ServiceError::BadConfig(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            ServiceError::Query(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody::new(self.code(), self.to_string());
        (self.status(), Json(body)).into_response()
    }
}
