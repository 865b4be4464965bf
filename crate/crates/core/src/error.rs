use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic in {path}: expected \"LFBT\", found {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("truncated payload in {path}: field `{field}` needs {expected} bytes, {available} available")]
    TruncatedPayload {
        path: PathBuf,
        field: &'static str,
        expected: usize,
        available: usize,
    },
    #[error("unsupported {field} in {path}: {value}")]
    UnsupportedVersion {
        path: PathBuf,
        field: &'static str,
        value: u32,
    },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("batch norm in train mode needs a non-empty batch")]
    ZeroBatch,
    #[error("backward called on a forward pass that was not recorded")]
    UnrecordedForward,
    #[error("channel count {channels} is not divisible by reduction factor {gamma}")]
    NonDivisible { channels: usize, gamma: usize },
    #[error("dual bilinear pooling needs equal spatial dims, got {a:?} and {b:?}")]
    SpatialMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("head {variant} expects {expected}, got {got}")]
    VariantShapeMismatch {
        variant: &'static str,
        expected: String,
        got: String,
    },
    #[error("covariance of class {class} is not positive definite")]
    NotPositiveDefinite { class: usize },
    #[error("too few samples: {detail}")]
    TooFewSamples { detail: String },
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
