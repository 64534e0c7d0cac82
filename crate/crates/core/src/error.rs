use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} at position {position} outside vocabulary of {vocab}")]
    TokenOutOfRange {
        position: usize,
        id: usize,
        vocab: usize,
    },
    #[error("segment id {id} at position {position} outside {segments} segments")]
    SegmentOutOfRange {
        position: usize,
        id: usize,
        segments: usize,
    },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("embedding width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("label {label} outside {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("distribution {index} is not normalized (sum {sum})")]
    NotNormalized { index: usize, sum: f64 },
    #[error("consistency term needs at least two predictions, got {0}")]
    TooFewPredictions(usize),
    #[error("mask index {index} out of range for extent {extent}")]
    MaskOutOfRange { index: usize, extent: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible task parameters: {0}")]
    Infeasible(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
