//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already run on this graph; call reset_grads first")]
    BackwardWithoutReset,

    #[error("last dimension {len} not divisible by pooling window {k}")]
    NotDivisible { len: usize, k: usize },

    #[error("empty token sequence")]
    EmptyTokens,

    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: usize, vocab: usize },

    #[error("question length {len} exceeds maximum {max}")]
    QuestionTooLong { len: usize, max: usize },

    #[error("all attention positions are masked")]
    AllMasked,

    #[error("empty image grid")]
    EmptyGrid,

    #[error("answer list empty after vocabulary filtering")]
    EmptyAnswerList,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("config/data mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
