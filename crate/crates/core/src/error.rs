use thiserror::Error;

/// Errors produced by the inference engine and its tooling.
#[derive(Debug, Error)]
pub enum LazyKvError {
    /// A caller broke an operation's precondition (shape mismatch, empty
    /// allowed set, duplicate push, ...). Indicates a bug in the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad user-supplied data: out-of-range token ids, empty corpora,
    /// malformed files, mismatched fingerprints.
    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LazyKvError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(LazyKvError::Contract(msg.into()))
}

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(LazyKvError::Input(msg.into()))
}
