use std::path::PathBuf;

use seascn_tensor::ShapeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image {height}x{width} invalid: {reason}")]
    ImageDims {
        height: usize,
        width: usize,
        reason: &'static str,
    },
    #[error("channel mismatch in {what}: expected {expected}, got {actual}")]
    ChannelMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("size mismatch in {what}: expected {expected:?}, got {actual:?}")]
    SizeMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("class label {label} outside 0..={max}")]
    LabelOutOfRange { label: usize, max: usize },
    #[error("invalid class id {0}")]
    InvalidClass(usize),
    #[error("degenerate box {w}x{h}")]
    DegenerateBox { w: f64, h: f64 },
    #[error("ground truth required for GT_JITTER proposals")]
    MissingGroundTruth,
    #[error("non-finite {what}: {value}")]
    NonFinite { what: String, value: f64 },
    #[error("config {key}: {msg}")]
    Config { key: String, msg: String },
    #[error("RLE counts sum to {actual}, mask size needs {expected}")]
    RleCounts { expected: usize, actual: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint config hash {found} does not match current architecture {expected}")]
    ConfigHash { found: String, expected: String },
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("unknown class id {0} in results")]
    UnknownClass(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png {path}: {msg}")]
    Png { path: PathBuf, msg: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("missing parameter {0}")]
    MissingParam(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
