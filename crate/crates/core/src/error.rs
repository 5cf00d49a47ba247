use alloc::string::String;

use crate::diff::DiffError;
use crate::envs::EnvError;

/// Errors raised by the model, trainer and verification layers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("all agents are dead; nothing to {0}")]
    AllDead(&'static str),
    #[error("agent {agent} has no available action")]
    NoAvailableAction { agent: usize },
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    DimMismatch { field: &'static str, expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("replay buffer holds {have} episodes, need {need}")]
    NotEnoughEpisodes { have: usize, need: usize },
    #[error("non-finite loss at episode {episode}: {detail}")]
    NonFiniteLoss { episode: u64, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}
