use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// config errors -> 2, data errors -> 3, numeric failures -> 4.
#[derive(Debug, Error)]
pub enum SnarmError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SnarmError {
    pub fn config(msg: impl Into<String>) -> Self {
        SnarmError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        SnarmError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        SnarmError::Numeric(msg.into())
    }

    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        SnarmError::Shape {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// Process exit code for the CLI (0 success, 2 config, 3 data, 4 numeric).
    pub fn exit_code(&self) -> i32 {
        match self {
            SnarmError::Config(_) => 2,
            SnarmError::Data(_) | SnarmError::Io(_) => 3,
            SnarmError::Shape { .. } => 2,
            SnarmError::Numeric(_) => 4,
            SnarmError::Backend { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, SnarmError>;
