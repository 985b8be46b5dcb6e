use thiserror::Error;

use crate::log::LogError;
use crate::session::Phase;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("study {0} not found")]
    StudyNotFound(String),
    #[error("subject {0} already has a session")]
    DuplicateSubject(String),
    #[error("display {width}x{height} is below the required {min_width}x{min_height}")]
    InsufficientDisplay {
        width: u32,
        height: u32,
        min_width: u32,
        min_height: u32,
    },
    #[error("not allowed in phase {phase}: {reason}")]
    PhaseViolation { phase: Phase, reason: String },
    #[error("response out of order, expected question {expected}")]
    OutOfOrder { expected: String },
    #[error("score {0} outside [0, 100]")]
    ScoreOutOfRange(f64),
    #[error("question {0} was already answered")]
    DuplicateResponse(String),
    #[error("session rejected: {0}")]
    Rejected(String),
    #[error("unknown asset {0}")]
    AssetNotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("invalid study config: {0}")]
    Config(String),
    #[error(transparent)]
    Log(#[from] LogError),
}

impl ServiceError {
    /// Stable machine-readable code used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::SessionNotFound(_) => "SESSION_NOT_FOUND",
            ServiceError::StudyNotFound(_) => "STUDY_NOT_FOUND",
            ServiceError::DuplicateSubject(_) => "DUPLICATE_SUBJECT",
            ServiceError::InsufficientDisplay { .. } => "INSUFFICIENT_DISPLAY",
            ServiceError::PhaseViolation { .. } => "PHASE_VIOLATION",
            ServiceError::OutOfOrder { .. } => "OUT_OF_ORDER",
            ServiceError::ScoreOutOfRange(_) => "SCORE_OUT_OF_RANGE",
            ServiceError::DuplicateResponse(_) => "DUPLICATE_RESPONSE",
            ServiceError::Rejected(_) => "REJECTED",
            ServiceError::AssetNotFound(_) => "ASSET_NOT_FOUND",
            ServiceError::BadRequest(_) => "BAD_REQUEST",
            ServiceError::Config(_) => "CONFIG",
            ServiceError::Log(_) => "STORAGE",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ServiceError::SessionNotFound(_)
            | ServiceError::StudyNotFound(_)
            | ServiceError::AssetNotFound(_) => 404,
            ServiceError::DuplicateSubject(_)
            | ServiceError::PhaseViolation { .. }
            | ServiceError::OutOfOrder { .. }
            | ServiceError::DuplicateResponse(_) => 409,
            ServiceError::InsufficientDisplay { .. } | ServiceError::ScoreOutOfRange(_) => 422,
            ServiceError::Rejected(_) => 403,
            ServiceError::BadRequest(_) => 400,
            ServiceError::Config(_) | ServiceError::Log(_) => 500,
        }
    }
}
