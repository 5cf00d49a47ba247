use alloc::vec;
use alloc::vec::Vec;

use super::buffer::Episode;
use crate::agent::{agent_forward, initial_hidden, masked_argmax, AgentVars};
use crate::diff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::envs::NOOP;
use crate::model::GraphMix;
use crate::Error;

/// Discount and local-loss weight of the aggregate loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda_local: f64,
}

/// Loss terms of one batch.
///
/// Sums run over valid steps; `total` is the aggregate
/// `(global + λ Σ_v local_v) / valid_steps` on the tape.
#[derive(Clone, Debug)]
pub struct Losses {
    pub total: Var,
    pub global_sum: f64,
    /// Per-agent local loss sums, dead steps excluded.
    pub local_sums: Vec<f64>,
    pub valid_steps: usize,
}

impl Losses {
    pub fn loss_global(&self) -> f64 {
        self.global_sum / self.valid_steps as f64
    }

    /// Local loss averaged over agents and valid steps.
    pub fn loss_local_mean(&self) -> f64 {
        let total: f64 = self.local_sums.iter().sum();
        total / (self.valid_steps * self.local_sums.len().max(1)) as f64
    }
}

/// Batch episodes ordered by decreasing length, so that the episodes
/// still running at step `t` are always a prefix.
struct Packed<'a> {
    episodes: Vec<&'a Episode>,
    /// `active[t]`: episodes with `len >= t`, for `t` in `0..=t_max`.
    active: Vec<usize>,
}

impl<'a> Packed<'a> {
    fn new(batch: &[&'a Episode], t_max: usize) -> Self {
        let mut episodes = batch.to_vec();
        episodes.sort_by_key(|e| core::cmp::Reverse(e.len));
        let active = (0..=t_max).map(|t| episodes.iter().take_while(|e| e.len >= t).count()).collect();
        Packed { episodes, active }
    }

    /// Episodes with a transition at step `t`.
    fn stepping(&self, t: usize) -> usize {
        self.active[t + 1]
    }

    fn t_max(&self) -> usize {
        self.active.len() - 1
    }
}

/// Agent input rows of the running episodes at every step `0..=t_max`.
fn batch_inputs(model: &GraphMix, packed: &Packed) -> Vec<Vec<f64>> {
    let layout = model.input_layout();
    let w = layout.width();
    let m = packed.episodes[0].n_agents;
    let mut steps = Vec::with_capacity(packed.active.len());
    for (t, &running) in packed.active.iter().enumerate() {
        let mut data = vec![0.0; running * m * w];
        for (b, ep) in packed.episodes[..running].iter().enumerate() {
            let obs = ep.obs_at(t);
            for v in 0..m {
                let last = if t > 0 { Some(ep.actions_at(t - 1)[v]) } else { None };
                let row = (b * m + v) * w;
                layout.write_row(&mut data[row..row + w], &obs[v * ep.obs_dim..(v + 1) * ep.obs_dim], last, v);
            }
        }
        steps.push(data);
    }
    steps
}

/// Runs the agent network over consecutive steps from a zero hidden state.
///
/// Step `t` feeds `rows[t]` input rows, which must not increase; the
/// hidden state of the first `rows[t]` rows carries over. Returns per-step
/// Q-values and hidden states.
pub fn unroll<T: Scalar>(
    tape: &mut Tape<T>,
    agent: &AgentVars,
    inputs: &[Vec<f64>],
    rows: &[usize],
    hidden_dim: usize,
) -> Result<(Vec<Var>, Vec<Var>), Error> {
    if inputs.len() != rows.len() || rows.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::DimMismatch { field: "unroll rows", expected: inputs.len(), found: rows.len() });
    }
    let mut h = initial_hidden(tape, rows.first().copied().unwrap_or(0), hidden_dim)?;
    let mut qs = Vec::with_capacity(inputs.len());
    let mut hs = Vec::with_capacity(inputs.len());
    for (step, &n) in inputs.iter().zip(rows) {
        if tape.shape(h)[0] != n {
            h = tape.narrow(h, 0, 0, n)?;
        }
        let width = step.len() / n.max(1);
        let x = tape.constant(Tensor::from_f64(&[n, width], step)?)?;
        let (q, h_next) = agent_forward(tape, agent, x, h)?;
        h = h_next;
        qs.push(q);
        hs.push(h);
    }
    Ok((qs, hs))
}

/// First `rows` rows of `x`.
fn head<T: Scalar>(tape: &mut Tape<T>, x: Var, rows: usize) -> Result<Var, Error> {
    Ok(if tape.shape(x)[0] == rows { x } else { tape.narrow(x, 0, 0, rows)? })
}

/// An all-dead team is replaced by all-alive so that the mixer stays
/// defined. Only terminal next states can be all-dead, and their
/// bootstrap is discarded.
fn computable(alive: &[bool]) -> impl Iterator<Item = bool> + '_ {
    let any = alive.iter().any(|&a| a);
    alive.iter().map(move |&a| a || !any)
}

fn check_batch(model: &GraphMix, batch: &[&Episode]) -> Result<(usize, usize), Error> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    let d = model.dims();
    let checks =
        [("obs_dim", d.obs_dim, first.obs_dim), ("n_actions", d.n_actions, first.n_actions), ("state_dim", d.state_dim, first.state_dim)];
    for (field, expected, found) in checks {
        if expected != found {
            return Err(Error::DimMismatch { field, expected, found });
        }
    }
    if first.n_agents > model.config().max_agents {
        return Err(Error::DimMismatch { field: "max_agents", expected: model.config().max_agents, found: first.n_agents });
    }
    for ep in batch {
        if ep.n_agents != first.n_agents || ep.obs_dim != first.obs_dim || ep.state_dim != first.state_dim {
            return Err(Error::DimMismatch { field: "n_agents", expected: first.n_agents, found: ep.n_agents });
        }
    }
    let t_max = batch.iter().map(|e| e.len).max().unwrap_or(0);
    if t_max == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((first.n_agents, t_max))
}

/// Values computed with the target networks for transitions `t → t + 1`,
/// one entry per valid sample in packed order.
struct Bootstrap {
    /// `[N]` target Q_tot at the main network's greedy next joint action.
    q_tot_next: Vec<f64>,
    /// `[N, M]` availability-masked max of each agent's target Q.
    q_max_next: Vec<f64>,
    /// `[N, M]` greedy next actions of the main network.
    greedy: Vec<usize>,
}

fn bootstrap<T: Scalar>(
    model: &GraphMix,
    target: &ParamStore<T>,
    packed: &Packed,
    inputs: &[Vec<f64>],
    main_q: &[Vec<f64>],
    m: usize,
) -> Result<Bootstrap, Error> {
    let a = model.dims().n_actions;
    let d = model.config().agent_hidden;
    let rows: Vec<usize> = packed.active.iter().map(|&r| r * m).collect();
    let n: usize = packed.active[1..].iter().sum();
    let mut tape = Tape::<T>::new();
    let vars = model.bind(&mut tape, target, true)?;
    let (qs, hs) = unroll(&mut tape, &vars.agent, inputs, &rows, d)?;

    let mut chosen = Vec::with_capacity(n * m);
    let mut greedy_all = Vec::with_capacity(n * m);
    let mut q_max = Vec::with_capacity(n * m);
    let mut alive = Vec::with_capacity(n * m);
    let mut state = Vec::with_capacity(n * model.dims().state_dim);
    for t in 1..=packed.t_max() {
        let target_q = tape.value(qs[t]).to_f64_vec();
        for (bi, ep) in packed.episodes[..packed.active[t]].iter().enumerate() {
            let avail = ep.avail_at(t);
            alive.extend(computable(ep.alive_at(t)));
            state.extend_from_slice(ep.state_at(t));
            for v in 0..m {
                let row = (bi * m + v) * a;
                let av = &avail[v * a..(v + 1) * a];
                let greedy = masked_argmax(&main_q[t][row..row + a], av).unwrap_or(NOOP);
                chosen.push(target_q[row + greedy]);
                greedy_all.push(greedy);
                let best = masked_argmax(&target_q[row..row + a], av).unwrap_or(NOOP);
                q_max.push(target_q[row + best]);
            }
        }
    }
    let q = tape.constant(Tensor::from_f64(&[n, m], &chosen)?)?;
    let h = tape.concat(&hs[1..], 0)?;
    let h = tape.reshape(h, &[n, m, d])?;
    let s = tape.constant(Tensor::from_f64(&[n, model.dims().state_dim], &state)?)?;
    let out = model.mix(&mut tape, &vars, q, h, s, &alive)?;
    Ok(Bootstrap { q_tot_next: tape.value(out.q_tot).to_f64_vec(), q_max_next: q_max, greedy: greedy_all })
}

/// Builds the aggregate loss of `batch` on `tape`.
///
/// Only valid steps are computed: episodes are ordered by decreasing length
/// and samples run time-major over the episodes still stepping. The global
/// target is `y = r + γ Q_tot'(s', a')` with `a'` the main network's greedy
/// next action evaluated by the target networks; the local target of agent
/// `v` is `y_v = α_v r + γ max_a Q'_v(t + 1, a)`. Bootstraps are dropped on
/// true terminals, and an agent dead at `t + 1` has no local bootstrap.
/// `α` comes from the main mixer and carries gradient.
pub fn compute_losses<T: Scalar>(
    tape: &mut Tape<T>,
    model: &GraphMix,
    params: &ParamStore<T>,
    target: &ParamStore<T>,
    batch: &[&Episode],
    cfg: &LossConfig,
) -> Result<Losses, Error> {
    let (m, t_max) = check_batch(model, batch)?;
    let packed = Packed::new(batch, t_max);
    let n: usize = packed.active[1..].iter().sum();
    let d = model.config().agent_hidden;
    let s_dim = model.dims().state_dim;
    let inputs = batch_inputs(model, &packed);
    let rows: Vec<usize> = packed.active.iter().map(|&r| r * m).collect();

    let vars = model.bind(tape, params, false)?;
    let (qs, hs) = unroll(tape, &vars.agent, &inputs, &rows, d)?;
    let main_q: Vec<Vec<f64>> = qs.iter().map(|&q| tape.value(q).to_f64_vec()).collect();
    let boot = bootstrap(model, target, &packed, &inputs, &main_q, m)?;
    for &a in &boot.greedy {
        tape.note_branch(a as u64);
    }

    let mut actions = Vec::with_capacity(n * m);
    let mut alive = Vec::with_capacity(n * m);
    let mut state = Vec::with_capacity(n * s_dim);
    let mut local_mask = Vec::with_capacity(n * m);
    let mut rewards = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut local_boot = Vec::with_capacity(n * m);
    let mut k = 0;
    for t in 0..t_max {
        for ep in &packed.episodes[..packed.stepping(t)] {
            let (r, cont) = (ep.rewards[t], if ep.terminal[t] { 0.0 } else { cfg.gamma });
            rewards.push(r);
            y.push(r + cont * boot.q_tot_next[k]);
            state.extend_from_slice(ep.state_at(t));
            let now = ep.alive_at(t);
            alive.extend(computable(now));
            for (v, &is_alive) in now.iter().enumerate() {
                actions.push(ep.actions_at(t)[v]);
                local_mask.push(if is_alive { 1.0 } else { 0.0 });
                let next_alive = ep.alive_at(t + 1)[v];
                local_boot.push(if next_alive { cont * boot.q_max_next[k * m + v] } else { 0.0 });
            }
            k += 1;
        }
    }

    let mut q_steps = Vec::with_capacity(t_max);
    let mut h_steps = Vec::with_capacity(t_max);
    for t in 0..t_max {
        q_steps.push(head(tape, qs[t], rows[t + 1])?);
        h_steps.push(head(tape, hs[t], rows[t + 1])?);
    }
    let q_all = tape.concat(&q_steps, 0)?;
    let q_chosen = tape.gather_last(q_all, &actions)?;
    let q_chosen = tape.reshape(q_chosen, &[n, m])?;
    let h = tape.concat(&h_steps, 0)?;
    let h = tape.reshape(h, &[n, m, d])?;
    let s = tape.constant(Tensor::from_f64(&[n, s_dim], &state)?)?;
    let out = model.mix(tape, &vars, q_chosen, h, s, &alive)?;

    let y = tape.constant(Tensor::from_f64(&[n], &y)?)?;
    let global = tape.sq_diff(out.q_tot, y)?;
    let global = tape.sum_all(global)?;

    let r = tape.constant(Tensor::from_f64(&[n, 1], &rewards)?)?;
    let boot_v = tape.constant(Tensor::from_f64(&[n, m], &local_boot)?)?;
    let mask = tape.constant(Tensor::from_f64(&[n, m], &local_mask)?)?;
    let share = tape.mul(out.alpha, r)?;
    let y_local = tape.add(share, boot_v)?;
    let local = tape.sq_diff(y_local, q_chosen)?;
    let local = tape.mul(local, mask)?;
    let per_agent = tape.sum(local, 0)?;
    let local = tape.sum_all(per_agent)?;

    let weighted = tape.affine(local, T::from_f64_lossy(cfg.lambda_local), T::zero())?;
    let total = tape.add(global, weighted)?;
    let total = tape.affine(total, T::one() / T::from_usize(n).unwrap_or_else(T::one), T::zero())?;

    Ok(Losses {
        total,
        global_sum: tape.value(global).data()[0].to_f64_lossless(),
        local_sums: tape.value(per_agent).to_f64_vec(),
        valid_steps: n,
    })
}
