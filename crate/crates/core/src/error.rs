use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the proposal pipeline and its tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image has a zero dimension")]
    EmptyImage,
    #[error("image {width}x{height} exceeds the {limit}x{limit} limit")]
    ImageTooLarge { width: u32, height: u32, limit: u32 },
    #[error("scale-too-large: scale ({m},{n}) needs at least {need_w}x{need_h} pixels")]
    ScaleTooLarge { m: u8, n: u8, need_w: usize, need_h: usize },
    #[error("too-small: HL map needs an image of at least 2x2, got {width}x{height}")]
    TooSmall { width: usize, height: usize },
    #[error("oob: 8x8 window at ({y},{x}) does not fit a {width}x{height} map")]
    WindowOutOfBounds { y: usize, x: usize, width: usize, height: usize },
    #[error("config-mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported-version: model file version {0}")]
    UnsupportedVersion(u64),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("no-positives: no annotated box maps onto a template scale")]
    NoPositives,
    #[error("training set needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("no-gt: ground truth is empty")]
    NoGroundTruth,
    #[error("unsupported perturbation level: {0}")]
    UnsupportedLevel(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }
}
