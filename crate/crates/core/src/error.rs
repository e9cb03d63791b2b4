use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Each variant maps onto one failure family so the CLI can pick an exit
/// code without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input format error at line {line}: {message}")]
    InputFormat { line: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("context overflow: sequence of {len} positions exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("incomplete report: method `{method}` has no prediction for users {users:?}")]
    IncompleteReport { method: String, users: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    pub(crate) fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric(message.into())
    }
}
