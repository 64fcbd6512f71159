use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("{0} requires a non-empty input")]
    Empty(&'static str),

    #[error("token index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("finite-difference oracle detected a non-deterministic loss ({first} vs {second})")]
    NonDeterministicLoss { first: f64, second: f64 },

    #[error("corpus directory {0} contains no .txt files")]
    EmptyCorpus(PathBuf),

    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    Decode { path: PathBuf, offset: usize },

    #[error("character {ch:?} (U+{code:04X}) is not in the vocabulary", code = *ch as u32)]
    UnknownChar { ch: char },

    #[error("no training windows: every document is shorter than {needed} tokens")]
    NoWindows { needed: usize },

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("non-finite loss at epoch {epoch}, window {window}")]
    NonFiniteLoss { epoch: usize, window: usize },

    #[error("checkpoint checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint format version {found} is newer than supported version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("unknown cell kind {0:?}")]
    UnknownCellKind(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
