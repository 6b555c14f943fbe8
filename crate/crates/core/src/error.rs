use std::path::PathBuf;

/// Errors raised by the experiment engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dataset layout or run configuration is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("degenerate normalization statistics (std = {std})")]
    DegenerateStats { std: f64 },

    #[error("class {0} has no records")]
    EmptyClass(&'static str),

    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },

    /// Pretrained weights are missing or do not match the architecture.
    #[error("weight file {path}: {reason}\n{hint}")]
    Weights {
        path: PathBuf,
        reason: String,
        hint: String,
    },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        lr: f64,
    },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("image decode {path}: {source}")]
    Decode { path: PathBuf, source: image::ImageError },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
