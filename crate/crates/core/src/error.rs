use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("degenerate batch: no target positions survive masking")]
    DegenerateBatch,

    #[error("optimizer precondition violated: {0}")]
    OptimizerPrecondition(String),

    #[error("{path}:{line}: {reason}")]
    Ingestion {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("tokenizer vocabulary would be empty")]
    EmptyVocab,

    #[error("invalid grammar: {0}")]
    GrammarValidation(String),

    #[error("sequence of length {len} exceeds context length {max}")]
    ContextLength { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Vocab { id: u32, vocab: usize },

    #[error("generation: {0}")]
    Generation(String),

    #[error("sequence of length {0} is too short to score (need at least 2 tokens)")]
    DegenerateSequence(usize),

    #[error("generation of length {0} is too short to score")]
    ShortGeneration(usize),

    #[error("rollout shape: {0}")]
    RolloutShape(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("task definition: {0}")]
    TaskDefinition(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
