use thiserror::Error;

/// Error type shared across the workspace.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument or configuration value.
    #[error("argument error: {0}")]
    Argument(String),

    /// Numeric failure (non-finite values, no convergence).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation invoked in the wrong state (backward before forward,
    /// merging twice, non-deterministic loss function).
    #[error("state error: {0}")]
    State(String),

    /// Malformed file (bad magic, version, CRC, duplicate tensor names).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
