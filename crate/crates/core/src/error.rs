use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("affine transform is singular or near-singular (|det| = {det:e})")]
    SingularTransform { det: f64 },

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("image dimensions {h}x{w} are not divisible by {multiple}; pad to {need_h}x{need_w}")]
    Indivisible { h: usize, w: usize, multiple: usize, need_h: usize, need_w: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {found}; supported versions: {supported:?}")]
    Version { found: u16, supported: Vec<u16> },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
