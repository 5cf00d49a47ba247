//! Decentralized partially observable environments.
//!
//! Each environment exposes per-agent observations, a global state, a shared
//! scalar reward, alive masks and per-agent action availability. Action `0`
//! is the no-op; it is always available and is the only action of a dead
//! agent.

mod coop_grid;
mod two_step;

use alloc::vec::Vec;

pub use coop_grid::{fixed_size_state, CoopGrid, CoopGridConfig, GridEntities};
pub use two_step::{brute_force_optimal_return, OracleResult, TwoStep, TwoStepConfig};

/// Action id every agent may take, and the only one left to a dead agent.
pub const NOOP: usize = 0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("expected {expected} actions, got {found}")]
    ActionCount { expected: usize, found: usize },
    #[error("action {action} is not available to agent {agent}")]
    Unavailable { agent: usize, action: usize },
    #[error("episode already terminated")]
    Terminated,
    #[error("environment too large for enumeration: {0}")]
    TooLarge(&'static str),
    #[error("invalid environment parameter: {0}")]
    Invalid(&'static str),
}

/// Static description of an environment's interface.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    pub episode_limit: usize,
    pub gamma: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_agents == 0 || self.obs_dim == 0 || self.state_dim == 0 || self.n_actions == 0 {
            return Err(EnvError::Invalid("dimensions must be positive"));
        }
        if self.episode_limit == 0 {
            return Err(EnvError::Invalid("episode_limit must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(EnvError::Invalid("gamma must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything the agents and the learner see after `reset` or `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// `n_agents × obs_dim`, row-major.
    pub observations: Vec<f64>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    /// Terminal only because the step limit was reached.
    pub truncated: bool,
    /// Task solved (all targets captured); always false for tabular games.
    pub success: bool,
    pub alive: Vec<bool>,
    /// `n_agents × n_actions`, row-major.
    pub avail_actions: Vec<bool>,
}

impl StepResult {
    pub fn observation(&self, agent: usize, obs_dim: usize) -> &[f64] {
        &self.observations[agent * obs_dim..(agent + 1) * obs_dim]
    }

    pub fn avail(&self, agent: usize, n_actions: usize) -> &[bool] {
        &self.avail_actions[agent * n_actions..(agent + 1) * n_actions]
    }
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode; deterministic given `seed`.
    fn reset(&mut self, seed: u64) -> StepResult;

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError>;
}

/// Any of the bundled environments.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Env {
    TwoStep(TwoStep),
    CoopGrid(CoopGrid),
}

impl Environment for Env {
    fn spec(&self) -> &EnvSpec {
        match self {
            Env::TwoStep(e) => e.spec(),
            Env::CoopGrid(e) => e.spec(),
        }
    }

    fn reset(&mut self, seed: u64) -> StepResult {
        match self {
            Env::TwoStep(e) => e.reset(seed),
            Env::CoopGrid(e) => e.reset(seed),
        }
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        match self {
            Env::TwoStep(e) => e.step(actions),
            Env::CoopGrid(e) => e.step(actions),
        }
    }
}

pub(crate) fn check_actions(actions: &[usize], n_agents: usize, n_actions: usize, avail: &[bool]) -> Result<(), EnvError> {
    if actions.len() != n_agents {
        return Err(EnvError::ActionCount { expected: n_agents, found: actions.len() });
    }
    for (agent, &action) in actions.iter().enumerate() {
        if action >= n_actions || !avail[agent * n_actions + action] {
            return Err(EnvError::Unavailable { agent, action });
        }
    }
    Ok(())
}
