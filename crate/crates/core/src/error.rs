use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("no data: {0}")]
    NoData(&'static str),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("already exists: {0}")]
    Duplicate(String),

    #[error("model fit failed: {0}")]
    FitFailed(String),

    #[error("insufficient history: need {need} observations, have {have}")]
    InsufficientHistory { need: usize, have: usize },

    #[error("no capacity: {0}")]
    NoCapacity(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("rate limited, retry after {retry_after_ms} ms")]
    RateLimited { retry_after_ms: u32 },

    #[error("lease expired")]
    LeaseExpired,

    #[error("integrity violation: {0}")]
    IntegrityViolation(String),

    #[error("remote error {code}: {message}")]
    Remote { code: u16, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }
}
