use alloc::vec;
use alloc::vec::Vec;

use super::{check_actions, EnvError, EnvSpec, Environment, StepResult};

/// Payoff tables of the two-agent, two-phase coordination game.
///
/// In the first step agent 0 picks the phase: action 0 leads to phase A,
/// any other action to phase B. Both agents then play one matrix game in
/// that phase. Tables are indexed `[agent0_action][agent1_action]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct TwoStepConfig {
    /// Immediate reward of the phase-selection step.
    pub selection: Vec<Vec<f64>>,
    pub phase_a: Vec<Vec<f64>>,
    pub phase_b: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        TwoStepConfig {
            selection: vec![vec![0.0; 2]; 2],
            phase_a: vec![vec![7.0; 2]; 2],
            phase_b: vec![vec![0.0, 1.0], vec![1.0, 8.0]],
            gamma: 0.99,
        }
    }
}

const START: usize = 0;
const PHASE_A: usize = 1;
const PHASE_B: usize = 2;
const DONE: usize = 3;
const N_AGENTS: usize = 2;
const OBS_DIM: usize = 3;

#[derive(Clone, Debug)]
pub struct TwoStep {
    config: TwoStepConfig,
    spec: EnvSpec,
    phase: usize,
}

impl TwoStep {
    pub fn new(config: TwoStepConfig) -> Result<Self, EnvError> {
        let n = config.selection.len();
        let square = |t: &Vec<Vec<f64>>| t.len() == n && t.iter().all(|row| row.len() == n);
        if n == 0 || !square(&config.selection) || !square(&config.phase_a) || !square(&config.phase_b) {
            return Err(EnvError::Invalid("payoff tables must be square with equal sizes"));
        }
        let all = config.selection.iter().chain(&config.phase_a).chain(&config.phase_b);
        if !all.flat_map(|r| r.iter()).all(|v| v.is_finite()) {
            return Err(EnvError::Invalid("payoffs must be finite"));
        }
        let spec =
            EnvSpec { n_agents: N_AGENTS, obs_dim: OBS_DIM, state_dim: OBS_DIM, n_actions: n, episode_limit: 2, gamma: config.gamma };
        spec.validate()?;
        Ok(TwoStep { config, spec, phase: START })
    }

    pub fn config(&self) -> &TwoStepConfig {
        &self.config
    }

    fn table(&self, phase: usize) -> &[Vec<f64>] {
        match phase {
            START => &self.config.selection,
            PHASE_A => &self.config.phase_a,
            _ => &self.config.phase_b,
        }
    }

    fn phase_after(&self, agent0_action: usize) -> usize {
        if agent0_action == 0 {
            PHASE_A
        } else {
            PHASE_B
        }
    }

    fn observe(&self, reward: f64) -> StepResult {
        let mut one_hot = vec![0.0; OBS_DIM];
        if self.phase < DONE {
            one_hot[self.phase] = 1.0;
        }
        let mut observations = Vec::with_capacity(N_AGENTS * OBS_DIM);
        for _ in 0..N_AGENTS {
            observations.extend_from_slice(&one_hot);
        }
        StepResult {
            observations,
            state: one_hot,
            reward,
            terminal: self.phase == DONE,
            truncated: false,
            success: false,
            alive: vec![true; N_AGENTS],
            avail_actions: vec![true; N_AGENTS * self.spec.n_actions],
        }
    }
}

impl Environment for TwoStep {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> StepResult {
        self.phase = START;
        self.observe(0.0)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        if self.phase == DONE {
            return Err(EnvError::Terminated);
        }
        let avail = vec![true; N_AGENTS * self.spec.n_actions];
        check_actions(actions, N_AGENTS, self.spec.n_actions, &avail)?;
        let reward = self.table(self.phase)[actions[0]][actions[1]];
        self.phase = if self.phase == START { self.phase_after(actions[0]) } else { DONE };
        Ok(self.observe(reward))
    }
}

/// Exhaustive-search result for a tabular game.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    /// Maximum discounted return over all joint-action sequences.
    pub value: f64,
    /// Joint-action sequences enumerated: `(n_actions^M)^steps`.
    pub sequences: usize,
    /// Distinct (phase, second-step joint action) outcomes reached:
    /// `n_actions^M · phases`.
    pub trajectories: usize,
}

/// Exact optimum of the two-step game by enumerating every joint-action
/// sequence through the environment's own `step`.
pub fn brute_force_optimal_return(env: &TwoStep) -> Result<OracleResult, EnvError> {
    let n = env.spec.n_actions;
    if n > 5 {
        return Err(EnvError::TooLarge("at most 5 actions per agent"));
    }
    let joint: Vec<[usize; 2]> = (0..n).flat_map(|a| (0..n).map(move |b| [a, b])).collect();
    let mut best = f64::NEG_INFINITY;
    let mut sequences = 0;
    let mut seen = Vec::new();
    for first in &joint {
        for second in &joint {
            let mut sim = env.clone();
            sim.reset(0);
            let r0 = sim.step(first)?.reward;
            let phase = sim.phase;
            let r1 = sim.step(second)?.reward;
            let ret = r0 + env.spec.gamma * r1;
            sequences += 1;
            if !seen.contains(&(phase, *second)) {
                seen.push((phase, *second));
            }
            if ret > best {
                best = ret;
            }
        }
    }
    Ok(OracleResult { value: best, sequences, trajectories: seen.len() })
}
