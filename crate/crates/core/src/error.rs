use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("non-finite gradient in parameter `{name}`; update aborted")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss in round {round} at iteration {iteration}")]
    NonFiniteLoss { round: usize, iteration: usize },

    #[error("parameter/mask misalignment: {0}")]
    Misaligned(String),

    #[error("module index {index} out of range (model has {count} modules)")]
    ModuleOutOfRange { index: usize, count: usize },

    #[error("pruning ratio {0}% outside (0, 100)")]
    RatioOutOfRange(f64),

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("unknown synthetic dataset kind `{0}`")]
    UnknownDatasetKind(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

/// Failures while decoding IDX image files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic 0x{found:08x}; expected 0x00000803 (unsigned byte, 3 dimensions)")]
    BadMagic { found: u32 },
    #[error("IDX header truncated: need {needed} bytes, have {available}")]
    TruncatedHeader { needed: usize, available: usize },
    #[error("IDX payload truncated: need {needed} bytes, have {available}")]
    TruncatedPayload { needed: usize, available: usize },
    #[error("IDX dimensions {dims:?} overflow the addressable size")]
    DimensionOverflow { dims: Vec<u32> },
    #[error("IDX dimension of size zero in {dims:?}")]
    EmptyDimension { dims: Vec<u32> },
    #[error("IDX file has {extra} trailing bytes after the payload")]
    TrailingBytes { extra: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint payload hash mismatch (manifest {expected}, payload {actual})")]
    HashMismatch { expected: String, actual: String },
    #[error("corrupt checkpoint manifest: {0}")]
    Manifest(String),
}
