use std::io;

use thiserror::Error;

/// Errors produced anywhere in the alignment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("format error at line {line}: {message}")]
    FormatAt { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("missing record `{0}`")]
    MissingRecord(String),

    #[error("modality mismatch for `{id}`: expected {expected}")]
    ModalityMismatch { id: String, expected: &'static str },

    #[error("sequence too short: T={t} gives kernel {kernel} / stride {stride}")]
    SequenceTooShort {
        t: usize,
        kernel: usize,
        stride: usize,
    },

    #[error("kernel size {kernel} exceeds sequence length {t}")]
    KernelExceedsLength { t: usize, kernel: usize },

    #[error("frame parameters do not match sequence: {0}")]
    ParamMismatch(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("index {index} out of range for {len} candidates")]
    Index { index: usize, len: usize },

    #[error("invalid k={0}: must be at least 1")]
    InvalidK(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures that are numeric rather than caused by bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
