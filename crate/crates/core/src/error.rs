use std::path::PathBuf;

/// Errors produced anywhere in the extraction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input too short: {what} needs at least {needed} samples/frames, got {got}")]
    InputTooShort {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("sample rate {got} Hz is not supported (expected {expected} Hz), resample first")]
    SampleRate { expected: u32, got: u32 },

    #[error("malformed one-hot vector: {0}")]
    InvalidOneHot(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty reference: reference signal has zero energy")]
    EmptyReference,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown sound class {0}")]
    UnknownClass(usize),

    #[error("invalid clue: {0}")]
    Clue(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("loss became non-finite at step {step}; diagnostic snapshot at {snapshot:?}")]
    NonFiniteLoss { step: usize, snapshot: Option<PathBuf> },

    #[error("unsupported audio: {0}")]
    Audio(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
