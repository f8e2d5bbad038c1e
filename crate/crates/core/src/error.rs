use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape {0:?}: dimensions must be positive and rank 1-3")]
    InvalidShape(Vec<usize>),
    #[error("non-finite input in {0}")]
    NonFiniteInput(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss has no recorded provenance")]
    DetachedGraph,

    #[error("invalid block size {0}")]
    InvalidBlockSize(usize),
    #[error("unsupported bit width {0}")]
    InvalidBits(u8),

    #[error("invalid LoRA rank {rank} for a {d_out}x{d_in} layer")]
    InvalidRank { rank: usize, d_in: usize, d_out: usize },
    #[error("invalid LoRA alpha {0}")]
    InvalidAlpha(f64),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("operation requires a {expected} head, model has {actual}")]
    WrongHead {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,

    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("objective {objective} incompatible with {head} head")]
    IncompatibleObjective {
        objective: &'static str,
        head: &'static str,
    },

    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("duplicate example id {0}")]
    DuplicateId(String),
    #[error("score {raw} outside scale range [{min}, {max}]")]
    ScoreOutOfRange { raw: f64, min: f64, max: f64 },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),

    #[error("grade {0} outside [0, 1]")]
    InvalidGrade(f64),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("invalid run config: {0}")]
    InvalidRunConfig(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for this error: 2 for usage or validation failures,
    /// 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSpec(_)
            | Error::InvalidConfig(_)
            | Error::InvalidRunConfig(_)
            | Error::IncompatibleCheckpoint(_)
            | Error::IncompatibleObjective { .. }
            | Error::InvalidRank { .. }
            | Error::InvalidAlpha(_)
            | Error::InvalidBlockSize(_)
            | Error::InvalidBits(_)
            | Error::InvalidGrade(_)
            | Error::WrongHead { .. } => 2,
            _ => 1,
        }
    }
}
