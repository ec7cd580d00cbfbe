use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range input supplied by the caller.
    #[error("invalid input: {0}")]
    Input(String),

    /// Input is well-formed but outside the domain of the operation
    /// (e.g. a disconnected graph where connectivity is required).
    #[error("domain error: {0}")]
    Domain(String),

    /// The exact algorithm refuses to run beyond its configured size cap.
    #[error("capability exceeded: {0}")]
    Capability(String),

    /// A hypothesis of a closed-form result does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A numerical routine failed (singular system, non-finite values).
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Row-level data error while reading a tabular file.
    #[error("data error at row {row}: {msg}")]
    Data { row: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
