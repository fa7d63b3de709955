use std::path::PathBuf;

/// Errors raised by the model, training, and evaluation code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or mismatched inputs (shapes, ids, resolutions).
    #[error("input error: {0}")]
    Input(String),

    /// A call that violates an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values produced inside a forward pass.
    #[error("numeric error in {stage}: {message}")]
    Numeric { stage: String, message: String },

    /// A loss term became NaN or infinite during training.
    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: u64 },

    /// Dataset manifest problems, one entry per offending record.
    #[error("dataset ingestion failed:\n  {}", .0.join("\n  "))]
    Ingest(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("keypoint detector failed on image `{image_id}`: {message}")]
    Detector { image_id: String, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(stage: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
