use thiserror::Error;

use crate::envcore::EnvError;
use crate::expio::ConfigError;
use crate::matrix_games::GameError;
use crate::nn::NnError;
use crate::planner::ShapingError;

/// Crate-level error; each subsystem keeps its own enum.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("non-finite parameters in {network} after iteration {iteration}")]
    NonFiniteParameters { network: String, iteration: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
