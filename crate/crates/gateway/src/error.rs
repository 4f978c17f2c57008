//! API error taxonomy. Each variant maps to one HTTP status and one stable code.

use iohrt_core::auth::AuthError;
use iohrt_core::control::ControlError;
use iohrt_core::registry::RegistryError;
use iohrt_core::store::StoreError;
use serde::Serialize;
use thiserror::Error;

use crate::missions::MissionError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ApiError {
    #[error("missing, invalid or expired token")]
    Unauthenticated,
    #[error("{0}")]
    Forbidden(String),
    #[error("invalid username or password")]
    InvalidCredentials,
    #[error("too many failed logins; retry in {retry_after_ms} ms")]
    LockedOut { retry_after_ms: u64 },
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Busy(String),
    #[error("{0}")]
    NotHolder(String),
    #[error("{0}")]
    DeviceOffline(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    DimensionMismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Serialize)]
pub struct ErrorResponse {
    pub error: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::Unauthenticated | ApiError::InvalidCredentials => 401,
            ApiError::Forbidden(_) => 403,
            ApiError::NotFound(_) => 404,
            ApiError::Busy(_) | ApiError::NotHolder(_) | ApiError::DeviceOffline(_) | ApiError::Conflict(_) => 409,
            ApiError::DimensionMismatch(_) | ApiError::Invalid(_) => 422,
            ApiError::LockedOut { .. } => 429,
            ApiError::Internal(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthenticated => "unauthenticated",
            ApiError::Forbidden(_) => "forbidden",
            ApiError::InvalidCredentials => "invalid_credentials",
            ApiError::LockedOut { .. } => "locked_out",
            ApiError::NotFound(_) => "not_found",
            ApiError::Busy(_) => "busy",
            ApiError::NotHolder(_) => "not_holder",
            ApiError::DeviceOffline(_) => "device_offline",
            ApiError::Conflict(_) => "conflict",
            ApiError::DimensionMismatch(_) => "dimension_mismatch",
            ApiError::Invalid(_) => "invalid",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn body(&self) -> ErrorResponse {
        ErrorResponse { error: self.code(), message: self.to_string() }
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        match e {
            AuthError::Unauthenticated => ApiError::Unauthenticated,
            AuthError::Forbidden { .. } => ApiError::Forbidden(e.to_string()),
            AuthError::InvalidCredentials => ApiError::InvalidCredentials,
            AuthError::LockedOut { retry_after_ms } => ApiError::LockedOut { retry_after_ms },
            AuthError::Conflict(_) => ApiError::Conflict(e.to_string()),
            AuthError::UnknownUser(_) => ApiError::NotFound(e.to_string()),
            AuthError::Invalid(_) => ApiError::Invalid(e.to_string()),
            AuthError::Storage(_) => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Unknown(_) | RegistryError::NotARobot(_) => ApiError::NotFound(e.to_string()),
            RegistryError::Disconnected(_) => ApiError::DeviceOffline(e.to_string()),
            RegistryError::Busy { .. } => ApiError::Busy(e.to_string()),
            RegistryError::NotHolder(_) => ApiError::NotHolder(e.to_string()),
            RegistryError::DuplicateLive(_) => ApiError::Conflict(e.to_string()),
            RegistryError::Invalid(_) => ApiError::Invalid(e.to_string()),
        }
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::DimensionMismatch { .. } => ApiError::DimensionMismatch(e.to_string()),
            _ => ApiError::Invalid(e.to_string()),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Invalid(_) => ApiError::Invalid(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<MissionError> for ApiError {
    fn from(e: MissionError) -> Self {
        match e {
            MissionError::Unknown(_) => ApiError::NotFound(e.to_string()),
            MissionError::Transition { .. } => ApiError::Conflict(e.to_string()),
        }
    }
}
