use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("duplicate order id `{0}`")]
    DuplicateOrder(String),

    #[error("event time {event_time} predates snapshot origin {origin}")]
    BeforeOrigin { event_time: i64, origin: i64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("model version mismatch: expected {expected:016x}, found {found:016x}")]
    VersionMismatch { expected: u64, found: u64 },
}

impl Error {
    /// Short stable tag used in machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::DuplicateOrder(_) => "duplicate_order",
            Error::BeforeOrigin { .. } => "before_origin",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Invalid(_) => "invalid",
            Error::VersionMismatch { .. } => "version_mismatch",
        }
    }
}
