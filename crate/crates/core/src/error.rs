//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for tensor, image, model, and data operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or image shapes; the message names both sides.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value (bad channel grouping, even kernel, unknown key...).
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (non-scalar loss, malformed one-hot, missing grad).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid operation parameter (non-positive sigma, even kernel size...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Thresholding left no foreground pixels to work with.
    #[error("no foreground pixels after thresholding")]
    NoForeground,

    /// Dataset-level problem: missing classes, undecodable files, bad splits.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure during training or evaluation (NaN/Inf loss).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
