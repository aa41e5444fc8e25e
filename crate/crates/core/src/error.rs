use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("loss does not depend on any parameter that requires grad")]
    NoGradPath,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sequence of {prompt} prompt + {target} target tokens exceeds context length {context}")]
    ContextOverflow {
        prompt: usize,
        target: usize,
        context: usize,
    },

    #[error("pairs {ids:?} exceed context length {context}")]
    PairsOverflow { ids: Vec<usize>, context: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    UnknownTokenId { id: usize, vocab: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training aborted at step {step} (lr {lr:e}, batch {batch}): {reason}")]
    NumericAbort {
        step: usize,
        lr: f64,
        batch: usize,
        reason: String,
    },

    #[error("record mismatch: {0}")]
    RecordMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
