use thiserror::Error;

/// Errors produced anywhere in the codec pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input in one of the event file formats.
    #[error("format error: {0}")]
    Format(String),

    /// A CSV line could not be parsed.
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },

    /// A value does not fit the range a format or structure allows.
    #[error("range error: {0}")]
    Range(String),

    /// Invalid configuration or call arguments.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Decoded data violates a structural invariant.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    /// Container was produced with different model weights.
    #[error("model mismatch: container expects model {expected}, loaded model is {actual}")]
    ModelMismatch { expected: String, actual: String },

    /// Weights or network outputs are not finite.
    #[error("model corruption: {0}")]
    ModelCorrupt(String),

    /// Training diverged or could not proceed.
    #[error("training error: {0}")]
    Training(String),

    /// Not enough data to build the requested dataset.
    #[error("insufficient data: requested {requested} tiles, only {available} available")]
    InsufficientData { requested: usize, available: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
