use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown entity {0:?}")]
    UnknownEntity(String),

    #[error("invalid dialogue {id:?}: {message}")]
    InvalidDialogue { id: String, message: String },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("turn index {index} out of range (dialogue has {turns} turns)")]
    TurnOutOfRange { index: usize, turns: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("every key is masked for query row {0}")]
    FullyMasked(usize),

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("token {0} is outside the vocabulary")]
    TokenOutOfRange(usize),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("invalid decoder prefix: {0}")]
    InvalidPrefix(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
