use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("failed to load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint/config mismatch on `{field}`: checkpoint has {checkpoint}, config has {config}")]
    CheckpointMismatch {
        field: String,
        checkpoint: String,
        config: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("loss diverged at step {step}: {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
