use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by pool loading, validation, and the numeric operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    Json { line: usize, message: String },

    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("pool {prompt_id:?}: candidate {index}: missing reward key {key:?}")]
    MissingRewardKey {
        prompt_id: String,
        index: usize,
        key: String,
    },

    #[error("pool {prompt_id:?}: candidate {index}: missing logprob")]
    MissingLogprob { prompt_id: String, index: usize },

    #[error("pool {prompt_id:?}: {message}")]
    InvalidPool { prompt_id: String, message: String },

    #[error("duplicate prompt_id {0:?}")]
    DuplicatePromptId(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("index {index} out of range for size {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("reference policy has zero mass at index {index} where it must be positive")]
    ZeroReference { index: usize },

    #[error("zero variance in {0}: rank correlation undefined")]
    ZeroVariance(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}
