use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty loss: every position is masked")]
    EmptyLoss,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("stale tape: backward already ran on this tape")]
    StaleTape,

    #[error("input too short: {got} samples, need at least {min}")]
    TooShort { got: usize, min: usize },

    #[error("wav format error in {chunk} chunk: {detail}")]
    WavFormat { chunk: &'static str, detail: String },

    #[error("character {0:?} is not in the vocabulary alphabet")]
    UnknownChar(char),

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("invalid model input: {0}")]
    Model(String),

    #[error("invalid keyword request: {0}")]
    Keywords(String),

    #[error("invalid training setup: {0}")]
    Train(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("invalid synthetic corpus spec: {0}")]
    Spec(String),

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn corrupt(path: &std::path::Path, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }

    /// Short machine-parsable class name, used by the CLI for its exit line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::EmptyLoss => "empty-loss",
            Error::NonScalar(_) => "non-scalar",
            Error::StaleTape => "stale-tape",
            Error::TooShort { .. } => "too-short",
            Error::WavFormat { .. } => "wav-format",
            Error::UnknownChar(_) => "unknown-char",
            Error::Vocab(_) => "vocab",
            Error::Model(_) => "model",
            Error::Keywords(_) => "keywords",
            Error::Train(_) => "train",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Eval(_) => "eval",
            Error::Spec(_) => "spec",
            Error::Corrupt { .. } => "corrupt",
            Error::Mismatch(_) => "mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
