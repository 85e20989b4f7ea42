use thiserror::Error;

use crate::env::Pose;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid pose {0:?}")]
    InvalidPose(Pose),
    #[error("invalid action index {0}")]
    InvalidAction(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid detector parameters: {0}")]
    InvalidDetector(String),
    #[error("scene generation failed: {0}")]
    Feasibility(String),
    #[error("no initial pose satisfies the rules in scene {0}")]
    EmptyPool(String),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("no supervised positions in batch")]
    NoValidPositions,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("nothing to summarize")]
    EmptyResults,
    #[error(transparent)]
    Autodiff(#[from] activedt_autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
