use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A line of an interchange file could not be decoded into the schema.
    #[error("{path}:{line}: parse error in field `{field}`: {msg}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        msg: String,
    },

    /// A decoded value violates a domain constraint (weekday/hour range,
    /// negative duration, unknown location reference, ...).
    #[error("{path}:{line}: invalid value for `{field}`: {msg}")]
    Validation {
        path: String,
        line: usize,
        field: String,
        msg: String,
    },

    /// Tensor or sequence shapes do not line up with the model configuration.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Bad or internally inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset-level problems that are not tied to a single input line.
    #[error("dataset error: {0}")]
    Data(String),

    /// Checkpoint files that cannot be loaded safely.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss; the message carries diagnostics.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
