use std::path::PathBuf;

/// Errors produced anywhere in the MTF estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("coordinate ({x}, {y}) outside image of size {width}x{height}")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no regions found above threshold")]
    NoRegions,
    #[error("patch contains saturated pixels")]
    Saturated,
    #[error("all exposures are saturated")]
    AllSaturated,
    #[error("kernel sums to zero; nothing to normalize")]
    ZeroSum,
    #[error("PSF support does not fit: {0}")]
    SupportOverflow(String),
    #[error("insufficient margin for valid convolution: {0}")]
    InsufficientMargin(String),
    #[error("frequency {freq} above Nyquist limit {nyquist}")]
    AboveNyquist { freq: f64, nyquist: f64 },
    #[error("grating too short: {periods:.2} interior periods, need at least 8")]
    TooFewPeriods { periods: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("query too far from all data; total kernel weight {0:e}")]
    QueryTooFar(f64),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::Dimensions(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
