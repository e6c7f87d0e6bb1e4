use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("click #{order} at ({x}, {y}) lies outside the {width}x{height} image")]
    ClickOutOfBounds {
        order: usize,
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no ground-truth mask is consistent with the clicks")]
    EmptyFeasibleSet,

    #[error("prediction already equals the ground truth")]
    NoError,

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
