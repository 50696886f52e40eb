use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: spatial dims {h}x{w} must be even")]
    OddSpatial { op: &'static str, h: usize, w: usize },
    #[error("image side {size} is not divisible by {multiple}; nearest valid size is {suggested}")]
    Indivisible {
        size: usize,
        multiple: usize,
        suggested: usize,
    },
    #[error("backward requires a scalar loss, got {0}")]
    NotScalar(Shape),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("image format not supported: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    TruncatedPixels { expected: usize, found: usize },
    #[error("image too small to resize: {h}x{w}")]
    DegenerateImage { h: usize, w: usize },
    #[error("png error: {0}")]
    Png(String),
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated blob {path}: need {needed} bytes, file has {len}")]
    TruncatedBlob {
        path: PathBuf,
        needed: usize,
        len: usize,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("layer {layer}: expected shape {expected}, found {found}")]
    LayerShape {
        layer: String,
        expected: Shape,
        found: Shape,
    },
    #[error("weight manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("dataset needs at least 2 images, found {0}")]
    TooFewImages(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
