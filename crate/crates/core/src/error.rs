use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {message}")]
    File { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
