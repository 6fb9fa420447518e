use thiserror::Error;

use crate::bitstream::BitstreamError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("code index {index} out of range for vocabulary of {vocab}")]
    IndexOutOfRange { index: u32, vocab: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sample rate {got} Hz not supported, expected {expected} Hz")]
    SampleRate { got: u32, expected: u32 },

    #[error("stream session is closed")]
    SessionClosed,

    #[error("feature extractor must be frozen before use as a loss target")]
    NotFrozen,

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Bitstream(#[from] BitstreamError),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
