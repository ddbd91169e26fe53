use thiserror::Error;

use crate::autodiff::ParamId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: kernel {kernel:?} produces an empty output for input {input:?}")]
    DegenerateOutput { op: &'static str, input: Vec<usize>, kernel: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("expected {expected} labels, got {found}")]
    LabelCount { expected: usize, found: usize },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("unknown graph node {0}")]
    UnknownNode(usize),
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("layer {index}: {reason}")]
    IncompatibleLayer { index: usize, reason: String },
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("segmentation head produces {produced:?} but the input resolution is {expected:?}")]
    ResolutionMismatch { produced: (usize, usize), expected: (usize, usize) },
    #[error("decoder expects features of shape {expected:?}, encoder produces {found:?}")]
    FeatureMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("input shape {found:?} does not match encoder input {expected:?}")]
    InputMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("missing parameter {0:?}")]
    MissingParam(ParamId),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid Adam hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("gradient for {id:?} has shape {grad:?}, parameter has {param:?}")]
    ShapeMismatch { id: ParamId, grad: Vec<usize>, param: Vec<usize> },
    #[error("gradient for {0:?} which is not tracked by this optimizer state")]
    UnknownParam(ParamId),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("iou of two empty pixel sets is undefined")]
    BothEmpty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error("invalid instance mask: {0}")]
    InvalidMask(String),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found}, expected {expected}")]
    Version { expected: u16, found: u16 },
    #[error("truncated input at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed content at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task parameters: {0}")]
    InvalidParams(String),
    #[error("cannot sample from an empty split")]
    EmptySplit,
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Step { iteration: u64, source: Box<TrainError> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Format(#[from] FormatError),
}
