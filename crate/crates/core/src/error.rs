use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("image too small: {width}x{height} (minimum {min}x{min})")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("coordinate ({x}, {y}) outside {width}x{height} grid")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("homography is singular (|det| = {0:e})")]
    SingularHomography(f64),
    #[error("dimensions {width}x{height} not divisible by {factor}")]
    NotDivisible {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("image {width}x{height} too small for a {levels}-level pyramid")]
    EmptyPyramid {
        width: usize,
        height: usize,
        levels: usize,
    },
    #[error("keypoint ({x:.2}, {y:.2}) too close to border for a {size}px patch")]
    BorderViolation { x: f32, y: f32, size: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("shape mismatch in layer `{layer}`: expected {expected}, found {found}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        found: String,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
