use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::envs::{EnvSpec, StepResult};
use crate::rng::Rng;
use crate::Error;

/// One complete episode of `len` transitions.
///
/// Per-step arrays hold `len + 1` entries (the initial step plus one per
/// transition); per-transition arrays hold `len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    pub len: usize,
    /// `(len + 1) × n_agents × obs_dim`
    pub obs: Vec<f64>,
    /// `(len + 1) × state_dim`
    pub state: Vec<f64>,
    /// `(len + 1) × n_agents`
    pub alive: Vec<bool>,
    /// `(len + 1) × n_agents × n_actions`
    pub avail: Vec<bool>,
    /// `len × n_agents`
    pub actions: Vec<usize>,
    /// `len`
    pub rewards: Vec<f64>,
    /// `len`; set only on a true terminal step, not on truncation.
    pub terminal: Vec<bool>,
    pub success: bool,
}

impl Episode {
    /// Starts a record from the reset result.
    pub fn start(spec: &EnvSpec, first: &StepResult) -> Self {
        let mut ep = Episode {
            n_agents: spec.n_agents,
            obs_dim: spec.obs_dim,
            state_dim: spec.state_dim,
            n_actions: spec.n_actions,
            len: 0,
            obs: Vec::new(),
            state: Vec::new(),
            alive: Vec::new(),
            avail: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: Vec::new(),
            success: false,
        };
        ep.push_step(first);
        ep
    }

    fn push_step(&mut self, s: &StepResult) {
        self.obs.extend_from_slice(&s.observations);
        self.state.extend_from_slice(&s.state);
        self.alive.extend_from_slice(&s.alive);
        self.avail.extend_from_slice(&s.avail_actions);
    }

    /// Appends the transition taken with `actions` that produced `next`.
    pub fn push(&mut self, actions: &[usize], next: &StepResult) {
        self.actions.extend_from_slice(actions);
        self.rewards.push(next.reward);
        self.terminal.push(next.terminal && !next.truncated);
        self.success = next.success;
        self.len += 1;
        self.push_step(next);
    }

    pub fn obs_at(&self, t: usize) -> &[f64] {
        let w = self.n_agents * self.obs_dim;
        &self.obs[t * w..(t + 1) * w]
    }

    pub fn state_at(&self, t: usize) -> &[f64] {
        &self.state[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn alive_at(&self, t: usize) -> &[bool] {
        &self.alive[t * self.n_agents..(t + 1) * self.n_agents]
    }

    pub fn avail_at(&self, t: usize) -> &[bool] {
        let w = self.n_agents * self.n_actions;
        &self.avail[t * w..(t + 1) * w]
    }

    pub fn actions_at(&self, t: usize) -> &[usize] {
        &self.actions[t * self.n_agents..(t + 1) * self.n_agents]
    }

    /// Undiscounted sum of rewards.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// `Σ_t γ^t r_t`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc)
    }
}

/// FIFO store of whole episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), episodes: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Appends, evicting the oldest episode when full.
    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn get(&self, index: usize) -> Option<&Episode> {
        self.episodes.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// `batch` distinct episodes drawn uniformly.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<Vec<&Episode>, Error> {
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.episodes.len() < batch {
            return Err(Error::NotEnoughEpisodes { have: self.episodes.len(), need: batch });
        }
        let picks = rand::seq::index::sample(rng, self.episodes.len(), batch);
        Ok(picks.into_iter().map(|i| &self.episodes[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use alloc::vec;

    fn tiny(tag: f64) -> Episode {
        let spec = EnvSpec { n_agents: 1, obs_dim: 1, state_dim: 1, n_actions: 1, episode_limit: 1, gamma: 0.5 };
        let step = StepResult {
            observations: vec![tag],
            state: vec![tag],
            reward: tag,
            terminal: false,
            truncated: false,
            success: false,
            alive: vec![true],
            avail_actions: vec![true],
        };
        Episode::start(&spec, &step)
    }

    #[test]
    fn eviction_is_fifo_and_bounded() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(tiny(i as f64));
        }
        assert_eq!(buf.len(), 3);
        let tags: Vec<f64> = buf.iter().map(|e| e.obs[0]).collect();
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..10 {
            buf.push(tiny(i as f64));
        }
        let mut rng = stream(1, Stream::Sampling);
        for _ in 0..50 {
            let mut tags: Vec<u32> = buf.sample(10, &mut rng).unwrap().iter().map(|e| e.obs[0] as u32).collect();
            tags.sort();
            assert_eq!(tags, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(buf.sample(11, &mut rng).unwrap_err(), Error::NotEnoughEpisodes { have: 10, need: 11 });
        assert_eq!(buf.sample(0, &mut rng).unwrap_err(), Error::EmptyBatch);
    }

    #[test]
    fn discounted_return_folds_backwards() {
        let mut ep = tiny(0.0);
        let mut next = StepResult {
            observations: vec![0.0],
            state: vec![0.0],
            reward: 1.0,
            terminal: false,
            truncated: false,
            success: false,
            alive: vec![true],
            avail_actions: vec![true],
        };
        ep.push(&[0], &next);
        next.reward = 4.0;
        next.terminal = true;
        next.truncated = true;
        ep.push(&[0], &next);
        assert_eq!(ep.discounted_return(0.5), 3.0);
        assert_eq!(ep.total_reward(), 5.0);
        assert_eq!(ep.terminal, vec![false, false]);
    }
}
