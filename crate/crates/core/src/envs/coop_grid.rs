//! Cooperative capture on a small grid.
//!
//! Agents must stand next to a target together (at least `capture_agents`
//! of them in the same step) to capture it. An agent that is adjacent to an
//! uncaptured target without enough partners risks dying each step. Targets
//! wander randomly. The team reward is `capture_reward` per capture and
//! nothing else; the episode succeeds when every target is captured.
//!
//! All constants here are this crate's own choices for a desk-scale task.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_actions, EnvError, EnvSpec, Environment, StepResult, NOOP};

/// Actions: 0 no-op, 1 up, 2 down, 3 left, 4 right.
pub const N_ACTIONS: usize = 5;
const SLOT: usize = 3;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct CoopGridConfig {
    pub grid_size: usize,
    pub n_agents: usize,
    pub n_targets: usize,
    /// Agents that must be adjacent to a target in the same step to capture it.
    pub capture_agents: usize,
    /// Per-step death probability of an agent adjacent to a target without
    /// enough partners.
    pub death_prob: f64,
    pub target_move_prob: f64,
    /// Chebyshev visibility radius of an agent.
    pub sight: usize,
    pub capture_reward: f64,
    pub episode_limit: usize,
    pub gamma: f64,
    pub obs_ally_slots: usize,
    pub obs_target_slots: usize,
    pub state_ally_slots: usize,
    pub state_target_slots: usize,
}

impl Default for CoopGridConfig {
    fn default() -> Self {
        CoopGridConfig {
            grid_size: 6,
            n_agents: 3,
            n_targets: 2,
            capture_agents: 2,
            death_prob: 0.1,
            target_move_prob: 0.5,
            sight: 2,
            capture_reward: 10.0,
            episode_limit: 30,
            gamma: 0.99,
            obs_ally_slots: 2,
            obs_target_slots: 2,
            state_ally_slots: 3,
            state_target_slots: 2,
        }
    }
}

type Cell = (usize, usize);

/// Positions of every entity; `None` marks a dead agent or captured target.
#[derive(Clone, Debug, PartialEq)]
pub struct GridEntities {
    pub grid_size: usize,
    pub allies: Vec<Option<Cell>>,
    pub targets: Vec<Option<Cell>>,
}

fn euclid(a: Cell, b: Cell) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    num_traits::Float::sqrt(dx * dx + dy * dy)
}

fn manhattan(a: Cell, b: Cell) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

/// Indices of present entities ordered by mean distance to `others`
/// (ties by index). With no `others` every distance is zero.
fn nearest_order(items: &[Option<Cell>], others: &[Option<Cell>]) -> Vec<usize> {
    let refs: Vec<Cell> = others.iter().flatten().copied().collect();
    let mut scored: Vec<(f64, usize)> = items
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            c.map(|c| {
                let mean = if refs.is_empty() { 0.0 } else { refs.iter().map(|&r| euclid(c, r)).sum::<f64>() / refs.len() as f64 };
                (mean, i)
            })
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(core::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Global state of fixed length `3·(k_allies + k_enemies)` regardless of
/// team size.
///
/// Ally slots hold the alive agents closest on average to the remaining
/// targets; target slots hold the remaining targets closest on average to
/// the alive agents. Each slot is `[present, x, y]` with coordinates scaled
/// to `[0, 1]`; unused slots are zero.
pub fn fixed_size_state(entities: &GridEntities, k_allies: usize, k_enemies: usize) -> Vec<f64> {
    let scale = (entities.grid_size.max(2) - 1) as f64;
    let mut state = vec![0.0; SLOT * (k_allies + k_enemies)];
    let mut fill = |slot: usize, c: Cell| {
        state[slot * SLOT] = 1.0;
        state[slot * SLOT + 1] = c.0 as f64 / scale;
        state[slot * SLOT + 2] = c.1 as f64 / scale;
    };
    for (slot, i) in nearest_order(&entities.allies, &entities.targets).into_iter().take(k_allies).enumerate() {
        fill(slot, entities.allies[i].expect("present ally"));
    }
    for (slot, i) in nearest_order(&entities.targets, &entities.allies).into_iter().take(k_enemies).enumerate() {
        fill(k_allies + slot, entities.targets[i].expect("present target"));
    }
    state
}

#[derive(Clone, Debug)]
pub struct CoopGrid {
    config: CoopGridConfig,
    spec: EnvSpec,
    rng: ChaCha8Rng,
    entities: GridEntities,
    t: usize,
    done: bool,
    avail: Vec<bool>,
}

impl CoopGrid {
    pub fn new(config: CoopGridConfig) -> Result<Self, EnvError> {
        if config.grid_size < 3 {
            return Err(EnvError::Invalid("grid_size must be at least 3"));
        }
        if config.n_agents == 0 || config.n_targets == 0 || config.capture_agents == 0 {
            return Err(EnvError::Invalid("agent, target and capture counts must be positive"));
        }
        if config.n_agents + config.n_targets > config.grid_size * config.grid_size {
            return Err(EnvError::Invalid("too many entities for the grid"));
        }
        if !(0.0..=1.0).contains(&config.death_prob) || !(0.0..=1.0).contains(&config.target_move_prob) {
            return Err(EnvError::Invalid("probabilities must lie in [0, 1]"));
        }
        if config.sight == 0 {
            return Err(EnvError::Invalid("sight must be positive"));
        }
        let spec = EnvSpec {
            n_agents: config.n_agents,
            obs_dim: SLOT * (1 + config.obs_ally_slots + config.obs_target_slots),
            state_dim: SLOT * (config.state_ally_slots + config.state_target_slots),
            n_actions: N_ACTIONS,
            episode_limit: config.episode_limit,
            gamma: config.gamma,
        };
        spec.validate()?;
        let entities =
            GridEntities { grid_size: config.grid_size, allies: vec![None; config.n_agents], targets: vec![None; config.n_targets] };
        Ok(CoopGrid {
            avail: vec![false; config.n_agents * N_ACTIONS],
            config,
            spec,
            rng: ChaCha8Rng::seed_from_u64(0),
            entities,
            t: 0,
            done: true,
        })
    }

    pub fn config(&self) -> &CoopGridConfig {
        &self.config
    }

    pub fn entities(&self) -> &GridEntities {
        &self.entities
    }

    fn target_at(&self, c: Cell) -> bool {
        self.entities.targets.contains(&Some(c))
    }

    fn agent_at(&self, c: Cell) -> bool {
        self.entities.allies.contains(&Some(c))
    }

    fn shifted(&self, c: Cell, action: usize) -> Option<Cell> {
        let g = self.config.grid_size;
        match action {
            1 if c.1 > 0 => Some((c.0, c.1 - 1)),
            2 if c.1 + 1 < g => Some((c.0, c.1 + 1)),
            3 if c.0 > 0 => Some((c.0 - 1, c.1)),
            4 if c.0 + 1 < g => Some((c.0 + 1, c.1)),
            _ => None,
        }
    }

    fn compute_avail(&self) -> Vec<bool> {
        let mut avail = vec![false; self.config.n_agents * N_ACTIONS];
        for (m, pos) in self.entities.allies.iter().enumerate() {
            avail[m * N_ACTIONS + NOOP] = true;
            if self.done {
                continue;
            }
            if let Some(c) = *pos {
                for a in 1..N_ACTIONS {
                    if let Some(n) = self.shifted(c, a) {
                        avail[m * N_ACTIONS + a] = !self.target_at(n);
                    }
                }
            }
        }
        avail
    }

    fn observations(&self) -> Vec<f64> {
        let cfg = &self.config;
        let scale = (cfg.grid_size - 1) as f64;
        let sight = cfg.sight as f64;
        let obs_dim = self.spec.obs_dim;
        let mut obs = vec![0.0; cfg.n_agents * obs_dim];
        let visible = |from: Cell, to: Cell| from.0.abs_diff(to.0) <= cfg.sight && from.1.abs_diff(to.1) <= cfg.sight;
        for (m, pos) in self.entities.allies.iter().enumerate() {
            let Some(me) = *pos else { continue };
            let row = &mut obs[m * obs_dim..(m + 1) * obs_dim];
            row[0] = 1.0;
            row[1] = me.0 as f64 / scale;
            row[2] = me.1 as f64 / scale;
            let mut write = |slot: usize, c: Cell| {
                row[slot * SLOT] = 1.0;
                row[slot * SLOT + 1] = (c.0 as f64 - me.0 as f64) / sight;
                row[slot * SLOT + 2] = (c.1 as f64 - me.1 as f64) / sight;
            };
            let mut allies: Vec<(usize, usize, Cell)> = self
                .entities
                .allies
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != m)
                .filter_map(|(j, c)| c.filter(|&c| visible(me, c)).map(|c| (manhattan(me, c), j, c)))
                .collect();
            allies.sort();
            for (slot, &(_, _, c)) in allies.iter().take(cfg.obs_ally_slots).enumerate() {
                write(1 + slot, c);
            }
            let mut targets: Vec<(usize, usize, Cell)> = self
                .entities
                .targets
                .iter()
                .enumerate()
                .filter_map(|(j, c)| c.filter(|&c| visible(me, c)).map(|c| (manhattan(me, c), j, c)))
                .collect();
            targets.sort();
            for (slot, &(_, _, c)) in targets.iter().take(cfg.obs_target_slots).enumerate() {
                write(1 + cfg.obs_ally_slots + slot, c);
            }
        }
        obs
    }

    fn result(&mut self, reward: f64, truncated: bool) -> StepResult {
        self.avail = self.compute_avail();
        let success = self.entities.targets.iter().all(|t| t.is_none());
        StepResult {
            observations: self.observations(),
            state: fixed_size_state(&self.entities, self.config.state_ally_slots, self.config.state_target_slots),
            reward,
            terminal: self.done,
            truncated,
            success,
            alive: self.entities.allies.iter().map(|a| a.is_some()).collect(),
            avail_actions: self.avail.clone(),
        }
    }

    fn random_free_cell(&mut self, keep_away: bool) -> Cell {
        let g = self.config.grid_size;
        let mut free: Vec<Cell> = Vec::new();
        let mut fallback: Vec<Cell> = Vec::new();
        for x in 0..g {
            for y in 0..g {
                let c = (x, y);
                if self.agent_at(c) || self.target_at(c) {
                    continue;
                }
                fallback.push(c);
                let near_agent = self.entities.allies.iter().flatten().any(|&a| manhattan(a, c) <= 1);
                if !keep_away || !near_agent {
                    free.push(c);
                }
            }
        }
        let pool = if free.is_empty() { &fallback } else { &free };
        pool[self.rng.random_range(0..pool.len())]
    }
}

impl Environment for CoopGrid {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> StepResult {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.t = 0;
        self.done = false;
        self.entities.allies.iter_mut().for_each(|a| *a = None);
        self.entities.targets.iter_mut().for_each(|t| *t = None);
        for m in 0..self.config.n_agents {
            let c = self.random_free_cell(false);
            self.entities.allies[m] = Some(c);
        }
        for k in 0..self.config.n_targets {
            let c = self.random_free_cell(true);
            self.entities.targets[k] = Some(c);
        }
        self.result(0.0, false)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::Terminated);
        }
        check_actions(actions, self.config.n_agents, N_ACTIONS, &self.avail)?;

        for (m, &a) in actions.iter().enumerate() {
            if let Some(c) = self.entities.allies[m] {
                if let Some(n) = self.shifted(c, a) {
                    self.entities.allies[m] = Some(n);
                }
            }
        }

        let mut reward = 0.0;
        for k in 0..self.config.n_targets {
            let Some(target) = self.entities.targets[k] else { continue };
            let adjacent: Vec<usize> =
                (0..self.config.n_agents).filter(|&m| self.entities.allies[m].is_some_and(|c| manhattan(c, target) == 1)).collect();
            if adjacent.len() >= self.config.capture_agents {
                self.entities.targets[k] = None;
                reward += self.config.capture_reward;
            } else {
                for m in adjacent {
                    if self.rng.random::<f64>() < self.config.death_prob {
                        self.entities.allies[m] = None;
                    }
                }
            }
        }

        for k in 0..self.config.n_targets {
            let Some(c) = self.entities.targets[k] else { continue };
            if self.rng.random::<f64>() >= self.config.target_move_prob {
                continue;
            }
            let moves: Vec<Cell> =
                (1..N_ACTIONS).filter_map(|a| self.shifted(c, a)).filter(|&n| !self.agent_at(n) && !self.target_at(n)).collect();
            if !moves.is_empty() {
                let pick = moves[self.rng.random_range(0..moves.len())];
                self.entities.targets[k] = Some(pick);
            }
        }

        self.t += 1;
        let cleared = self.entities.targets.iter().all(|t| t.is_none());
        let wiped = self.entities.allies.iter().all(|a| a.is_none());
        let truncated = !cleared && !wiped && self.t >= self.config.episode_limit;
        self.done = cleared || wiped || truncated;
        Ok(self.result(reward, truncated))
    }
}
