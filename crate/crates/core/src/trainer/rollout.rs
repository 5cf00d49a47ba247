use alloc::vec::Vec;

use rand::RngCore as _;

use super::buffer::Episode;
use crate::agent::{agent_forward, initial_hidden, select_actions, AgentVars};
use crate::diff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::envs::{Environment, StepResult};
use crate::model::GraphMix;
use crate::rng::{stream, Rng, Stream};
use crate::Error;

/// Decentralized decision rule applied once per environment step.
pub trait Policy {
    /// Called at the start of every episode.
    fn reset(&mut self, n_agents: usize) -> Result<(), Error>;

    fn act(&mut self, step: &StepResult, rng: &mut Rng) -> Result<Vec<usize>, Error>;
}

/// ε-greedy policy of the shared recurrent agent network.
pub struct AgentPolicy<'a, T: Scalar> {
    model: &'a GraphMix,
    params: &'a ParamStore<T>,
    epsilon: f64,
    tape: Tape<T>,
    vars: Option<AgentVars>,
    hidden: Option<Var>,
    last: Option<Vec<usize>>,
    last_q: Vec<f64>,
    n_agents: usize,
}

impl<'a, T: Scalar> AgentPolicy<'a, T> {
    pub fn new(model: &'a GraphMix, params: &'a ParamStore<T>, epsilon: f64) -> Self {
        AgentPolicy { model, params, epsilon, tape: Tape::new(), vars: None, hidden: None, last: None, last_q: Vec::new(), n_agents: 0 }
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.epsilon = epsilon;
    }

    /// Per-agent Q-values for `step` (`M × n_actions`), advancing the hidden
    /// state.
    pub fn q_values(&mut self, step: &StepResult) -> Result<Vec<f64>, Error> {
        let (vars, hidden) = match (self.vars, self.hidden) {
            (Some(v), Some(h)) => (v, h),
            _ => return Err(Error::Config("policy used before reset".into())),
        };
        let layout = self.model.input_layout();
        let rows = layout.rows(&step.observations, self.last.as_deref(), self.n_agents)?;
        let x = self.tape.constant(Tensor::from_f64(&[self.n_agents, layout.width()], &rows)?)?;
        let (q, h) = agent_forward(&mut self.tape, &vars, x, hidden)?;
        self.hidden = Some(h);
        self.last_q = self.tape.value(q).to_f64_vec();
        Ok(self.last_q.clone())
    }

    /// Q-values computed by the latest [`Policy::act`] or
    /// [`AgentPolicy::q_values`] call.
    pub fn last_q_values(&self) -> &[f64] {
        &self.last_q
    }
}

impl<T: Scalar> Policy for AgentPolicy<'_, T> {
    fn reset(&mut self, n_agents: usize) -> Result<(), Error> {
        self.tape = Tape::new();
        self.vars = Some(AgentVars::bind(&mut self.tape, self.params, true)?);
        self.hidden = Some(initial_hidden(&mut self.tape, n_agents, self.model.config().agent_hidden)?);
        self.last = None;
        self.n_agents = n_agents;
        Ok(())
    }

    fn act(&mut self, step: &StepResult, rng: &mut Rng) -> Result<Vec<usize>, Error> {
        let q = self.q_values(step)?;
        let n_actions = self.model.dims().n_actions;
        let actions = select_actions(&q, &step.avail_actions, &step.alive, n_actions, self.epsilon, rng)?;
        self.last = Some(actions.clone());
        Ok(actions)
    }
}

/// Plays one episode from `reset(env_seed)` and records it.
pub fn rollout_episode<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &mut E,
    policy: &mut P,
    env_seed: u64,
    rng: &mut Rng,
) -> Result<Episode, Error> {
    let mut step = env.reset(env_seed);
    let spec = env.spec().clone();
    let mut episode = Episode::start(&spec, &step);
    policy.reset(spec.n_agents)?;
    while !step.terminal {
        let actions = policy.act(&step, rng)?;
        step = env.step(&actions)?;
        episode.push(&actions, &step);
    }
    Ok(episode)
}

/// Greedy-evaluation summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub episodes: usize,
    pub success_rate: f64,
    /// Mean discounted return `Σ_t γ^t r_t`.
    pub mean_return: f64,
    pub mean_reward: f64,
    pub mean_len: f64,
}

/// Runs `n_episodes` with `policy` on episode seeds drawn from the
/// evaluation stream of `seed`; the same seed replays the same episodes.
pub fn evaluate_policy<E: Environment + ?Sized, P: Policy + ?Sized>(
    env: &mut E,
    policy: &mut P,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalStats, Error> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut seeds = stream(seed, Stream::Eval);
    let mut rng = stream(seed, Stream::Explore);
    let gamma = env.spec().gamma;
    let (mut success, mut ret, mut reward, mut len) = (0usize, 0.0, 0.0, 0usize);
    for _ in 0..n_episodes {
        let ep = rollout_episode(env, policy, seeds.next_u64(), &mut rng)?;
        success += ep.success as usize;
        ret += ep.discounted_return(gamma);
        reward += ep.total_reward();
        len += ep.len;
    }
    let n = n_episodes as f64;
    Ok(EvalStats {
        episodes: n_episodes,
        success_rate: success as f64 / n,
        mean_return: ret / n,
        mean_reward: reward / n,
        mean_len: len as f64 / n,
    })
}

/// Greedy (ε = 0) evaluation of the agent network.
pub fn evaluate<E: Environment + ?Sized, T: Scalar>(
    env: &mut E,
    model: &GraphMix,
    params: &ParamStore<T>,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalStats, Error> {
    let mut policy = AgentPolicy::new(model, params, 0.0);
    evaluate_policy(env, &mut policy, n_episodes, seed)
}
