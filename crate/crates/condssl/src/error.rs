use std::path::PathBuf;

/// Crate-wide error type. `Config` covers anything wrong with user-supplied
/// settings (bad ranges, unknown keys, incompatible dimensions) and maps to a
/// distinct process exit code in the CLI; the other variants are runtime
/// failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted on a non-finite loss; the diagnostic checkpoint
    /// written just before aborting is attached so the run can be inspected.
    #[error("non-finite loss at step {step}; diagnostic state written to {snapshot}")]
    NonFiniteLoss { step: u64, snapshot: PathBuf },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
