//! Crate-wide error type.

use std::path::PathBuf;

/// Everything that can go wrong across the tensor engine, data pipeline,
/// trainer and I/O layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: {msg} (shape {shape:?})")]
    BadShape {
        op: &'static str,
        msg: String,
        shape: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    BadArgument { op: &'static str, msg: String },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("conv3d: non-integral output extent for input {input:?}, kernel {kernel}, stride {stride}, padding {padding}")]
    ConvGeometry {
        input: Vec<usize>,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("forward: spatial extents {extents:?} must each be divisible by {divisor}")]
    IndivisibleExtents { extents: Vec<usize>, divisor: usize },

    #[error("maxpool: odd spatial extent in {shape:?}")]
    OddPoolExtent { shape: Vec<usize> },

    #[error("target class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("posterior undefined: fewer than 2 classes observed")]
    PosteriorUndefined,

    #[error("{term} is non-finite ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("invalid network config: {0}")]
    BadNetConfig(String),

    #[error("phantom generation: {0}")]
    Phantom(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("sliding window: stride {stride:?} exceeds patch {patch:?}")]
    StrideExceedsPatch {
        stride: [usize; 3],
        patch: [usize; 3],
    },

    #[error("config: unknown key '{0}'")]
    UnknownConfigKey(String),

    #[error("config: bad value for '{key}': {msg}")]
    BadConfigValue { key: String, msg: String },

    #[error("config: {0}")]
    BadConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint field mismatch: {field} (checkpoint has {found}, expected {expected})")]
    CheckpointMismatch {
        field: String,
        found: String,
        expected: String,
    },

    #[error("volume file {path}: {msg}")]
    VolumeFormat { path: PathBuf, msg: String },

    #[error("training aborted at iteration {iter}: {reason}")]
    TrainAbort { iter: usize, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
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
