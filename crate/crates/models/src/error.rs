use nesyaug_core::{CaptionError, GraphError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("step {t} outside [1, {t_max}]")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
}
