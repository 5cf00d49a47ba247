//! Shared-parameter recurrent Q-network and ε-greedy action selection.
//!
//! One parameter set serves every agent. The input row of agent `m` is its
//! observation, the one-hot of its previous action and the one-hot of its
//! id `m`; the id one-hot is sized to the maximum supported team size so
//! the same network runs unchanged for smaller or larger teams.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::diff::{gru_cell, linear, DiffError, GruWeights, ParamStore, Scalar, Tape, Tensor, Var};
use crate::envs::NOOP;
use crate::rng::Rng;
use crate::Error;

/// Tape handles of the agent network's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AgentVars {
    pub fc_in_w: Var,
    pub fc_in_b: Var,
    pub gru: GruWeights,
    pub fc_out_w: Var,
    pub fc_out_b: Var,
}

pub(crate) const FC_IN_W: &str = "agent.fc_in.weight";
pub(crate) const FC_IN_B: &str = "agent.fc_in.bias";
pub(crate) const GRU_W_IH: &str = "agent.gru.weight_ih";
pub(crate) const GRU_W_HH: &str = "agent.gru.weight_hh";
pub(crate) const GRU_B_IH: &str = "agent.gru.bias_ih";
pub(crate) const GRU_B_HH: &str = "agent.gru.bias_hh";
pub(crate) const FC_OUT_W: &str = "agent.fc_out.weight";
pub(crate) const FC_OUT_B: &str = "agent.fc_out.bias";

impl AgentVars {
    /// Binds the agent parameters; `frozen` binds them as constants.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, frozen: bool) -> Result<Self, DiffError> {
        let mut get = |name: &str| {
            let p = store.get(name)?;
            if frozen {
                tape.frozen(p)
            } else {
                tape.param(p)
            }
        };
        Ok(AgentVars {
            fc_in_w: get(FC_IN_W)?,
            fc_in_b: get(FC_IN_B)?,
            gru: GruWeights { w_ih: get(GRU_W_IH)?, w_hh: get(GRU_W_HH)?, b_ih: get(GRU_B_IH)?, b_hh: get(GRU_B_HH)? },
            fc_out_w: get(FC_OUT_W)?,
            fc_out_b: get(FC_OUT_B)?,
        })
    }
}

/// Input layout of the agent network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentInputLayout {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub max_agents: usize,
}

impl AgentInputLayout {
    pub fn width(&self) -> usize {
        self.obs_dim + self.n_actions + self.max_agents
    }

    /// Writes one input row `[obs | last-action one-hot | id one-hot]`.
    /// `last_action` is `None` at the first step of an episode.
    pub fn write_row(&self, out: &mut [f64], obs: &[f64], last_action: Option<usize>, agent_id: usize) {
        debug_assert_eq!(out.len(), self.width());
        out.fill(0.0);
        out[..self.obs_dim].copy_from_slice(obs);
        if let Some(a) = last_action {
            out[self.obs_dim + a] = 1.0;
        }
        out[self.obs_dim + self.n_actions + agent_id] = 1.0;
    }

    /// Input rows for all agents of one team at one step.
    pub fn rows(&self, observations: &[f64], last_actions: Option<&[usize]>, n_agents: usize) -> Result<Vec<f64>, Error> {
        if observations.len() != n_agents * self.obs_dim {
            return Err(Error::DimMismatch { field: "obs_dim", expected: n_agents * self.obs_dim, found: observations.len() });
        }
        if n_agents > self.max_agents {
            return Err(Error::DimMismatch { field: "max_agents", expected: self.max_agents, found: n_agents });
        }
        let w = self.width();
        let mut data = vec![0.0; n_agents * w];
        for m in 0..n_agents {
            let last = last_actions.map(|a| a[m]);
            if last.is_some_and(|a| a >= self.n_actions) {
                return Err(Error::DimMismatch { field: "n_actions", expected: self.n_actions, found: last.unwrap_or(0) + 1 });
            }
            self.write_row(&mut data[m * w..(m + 1) * w], &observations[m * self.obs_dim..(m + 1) * self.obs_dim], last, m);
        }
        Ok(data)
    }
}

/// One recurrent step for a block of agent rows.
///
/// `inputs: [R, obs_dim + n_actions + max_agents]`, `hidden: [R, D]`;
/// returns `(q_values [R, n_actions], new_hidden [R, D])`.
pub fn agent_forward<T: Scalar>(tape: &mut Tape<T>, vars: &AgentVars, inputs: Var, hidden: Var) -> Result<(Var, Var), DiffError> {
    let x = linear(tape, inputs, vars.fc_in_w, vars.fc_in_b)?;
    let x = tape.relu(x)?;
    let h = gru_cell(tape, x, hidden, &vars.gru)?;
    let q = linear(tape, h, vars.fc_out_w, vars.fc_out_b)?;
    Ok((q, h))
}

/// Zero hidden state for `rows` agent rows.
pub fn initial_hidden<T: Scalar>(tape: &mut Tape<T>, rows: usize, hidden_dim: usize) -> Result<Var, DiffError> {
    tape.constant(Tensor::zeros(&[rows, hidden_dim]))
}

/// Linear ε decay from `start` to `end` over `horizon` environment steps.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule { start: 1.0, end: 0.05, horizon: 50_000 }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, env_steps: u64) -> f64 {
        if self.horizon == 0 {
            return self.end;
        }
        if env_steps >= self.horizon {
            return self.end;
        }
        let frac = env_steps as f64 / self.horizon as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Index of the largest available value, lowest index on ties.
pub fn masked_argmax(values: &[f64], avail: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&v, &ok)) in values.iter().zip(avail).enumerate() {
        if ok && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// ε-greedy joint action. `q` and `avail` are `n_agents × n_actions`
/// row-major. Dead agents take the no-op.
pub fn select_actions(
    q: &[f64],
    avail: &[bool],
    alive: &[bool],
    n_actions: usize,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>, Error> {
    let mut actions = Vec::with_capacity(alive.len());
    for (m, &is_alive) in alive.iter().enumerate() {
        let row_avail = &avail[m * n_actions..(m + 1) * n_actions];
        let row_q = &q[m * n_actions..(m + 1) * n_actions];
        if !is_alive {
            actions.push(NOOP);
            continue;
        }
        let n_avail = row_avail.iter().filter(|&&a| a).count();
        if n_avail == 0 {
            return Err(Error::NoAvailableAction { agent: m });
        }
        let explore = epsilon > 0.0 && rng.random::<f64>() < epsilon;
        let action = if explore {
            let pick = rng.random_range(0..n_avail);
            row_avail.iter().enumerate().filter(|&(_, &a)| a).nth(pick).map(|(i, _)| i).unwrap_or(NOOP)
        } else {
            masked_argmax(row_q, row_avail).unwrap_or(NOOP)
        };
        actions.push(action);
    }
    Ok(actions)
}
