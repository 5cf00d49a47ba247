//! Property suites run at 64-bit precision: gradient fidelity, monotonicity,
//! greedy/enumeration agreement and mask normalizations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;

use crate::diff::{reference_diff_check, Objective, ParamStore, Scalar, Tape, Tensor, Var};
use crate::envs::{EnvSpec, StepResult, NOOP};
use crate::graphattn::{self, EdgeWeights};
use crate::mixer::MixerVariant;
use crate::model::{GraphMix, ModelConfig, ModelDims};
use crate::rng::{stream, Rng, Stream};
use crate::trainer::{compute_losses, Episode, LossConfig};
use crate::Error;

/// Names of the property suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Monotone,
    Igm,
    Masks,
    Vdn,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Grad, Suite::Monotone, Suite::Igm, Suite::Masks, Suite::Vdn];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Monotone => "monotone",
            Suite::Igm => "igm",
            Suite::Masks => "masks",
            Suite::Vdn => "vdn",
        }
    }

    pub fn parse(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    /// Random instances examined.
    pub cases: usize,
    /// The suite's headline statistic (see `label`).
    pub value: f64,
    pub label: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {} = {:.3e} over {} cases; {}", self.suite, self.label, self.value, self.cases, self.detail)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport, Error> {
    match suite {
        Suite::Grad => grad_suite(seed),
        Suite::Monotone => monotone_suite(seed, 200),
        Suite::Igm => igm_suite(seed, 500),
        Suite::Masks => masks_suite(seed, 1000),
        Suite::Vdn => vdn_reduction(seed, 500),
    }
}

fn gauss(rng: &mut Rng, scale: f64) -> f64 {
    // Sum of uniforms: cheap, symmetric and light-tailed.
    let s: f64 = (0..4).map(|_| rng.random::<f64>()).sum();
    (s - 2.0) * scale * num_traits::Float::sqrt(3f64)
}

/// Random alive mask of `m` agents with at least one alive.
fn random_alive(rng: &mut Rng, m: usize) -> Vec<bool> {
    loop {
        let alive: Vec<bool> = (0..m).map(|_| rng.random::<f64>() < 0.75).collect();
        if alive.iter().any(|&a| a) {
            return alive;
        }
    }
}

/// Random availability with the no-op always available.
fn random_avail(rng: &mut Rng, m: usize, n_actions: usize, alive: &[bool]) -> Vec<bool> {
    let mut avail = vec![false; m * n_actions];
    for v in 0..m {
        avail[v * n_actions + NOOP] = true;
        if alive[v] {
            for a in 1..n_actions {
                avail[v * n_actions + a] = rng.random::<f64>() < 0.7;
            }
        }
    }
    avail
}

/// Column-stochastic random edges on the alive block, `[1, M, M]`.
fn random_edges(rng: &mut Rng, alive: &[bool]) -> Result<Tensor<f64>, Error> {
    let m = alive.len();
    let mut tape = Tape::<f64>::verifying();
    let logits: Vec<f64> = (0..m * m).map(|_| gauss(rng, 1.5)).collect();
    let x = tape.constant(Tensor::from_f64(&[1, m, m], &logits)?)?;
    let mask: Vec<bool> = (0..m * m).map(|i| alive[i / m] && alive[i % m]).collect();
    let w = tape.masked_softmax(x, 1, &mask)?;
    Ok(tape.value(w).clone())
}

/// Randomly initialized parameters with every entry scaled by `scale`.
fn random_params(model: &GraphMix, rng: &mut Rng, scale: f64) -> ParamStore<f64> {
    let mut params = model.init_params::<f64>(rng);
    for p in params.iter_mut() {
        for v in p.values_mut() {
            *v *= scale;
        }
    }
    params
}

/// Random episode of `len` transitions. Agents may die (permanently, never
/// the whole team before the last step); dead agents get zero observations
/// and only the no-op.
pub fn synthetic_episode(rng: &mut Rng, spec: &EnvSpec, len: usize) -> Episode {
    let (m, a) = (spec.n_agents, spec.n_actions);
    let mut alive = vec![true; m];
    let step = |rng: &mut Rng, alive: &[bool], reward: f64, terminal: bool| {
        let observations = (0..m * spec.obs_dim).map(|i| if alive[i / spec.obs_dim] { gauss(rng, 1.0) } else { 0.0 }).collect();
        StepResult {
            observations,
            state: (0..spec.state_dim).map(|_| gauss(rng, 1.0)).collect(),
            reward,
            terminal,
            truncated: false,
            success: false,
            alive: alive.to_vec(),
            avail_actions: random_avail(rng, m, a, alive),
        }
    };
    let first = step(rng, &alive, 0.0, false);
    let mut ep = Episode::start(spec, &first);
    let mut avail = first.avail_actions;
    for t in 0..len {
        let actions: Vec<usize> = (0..m)
            .map(|v| {
                let options: Vec<usize> = (0..a).filter(|&i| avail[v * a + i]).collect();
                options[rng.random_range(0..options.len())]
            })
            .collect();
        let last = t + 1 == len;
        for v in 0..m {
            if alive[v] && alive.iter().filter(|&&x| x).count() > 1 && rng.random::<f64>() < 0.15 {
                alive[v] = false;
            }
        }
        let terminal = last && rng.random::<f64>() < 0.5;
        let reward = gauss(rng, 1.0);
        let next = step(rng, &alive, reward, terminal);
        avail = next.avail_actions.clone();
        ep.push(&actions, &next);
    }
    ep
}

fn small_model(variant: MixerVariant, layers: usize, attention: bool, dims: ModelDims) -> Result<GraphMix, Error> {
    let config = ModelConfig {
        agent_hidden: 6,
        attn_dim: 4,
        attention,
        mixer: variant,
        gnn_layers: layers,
        gnn_width: 5,
        gin_hidden: 4,
        hyper_hidden: 5,
        max_agents: 3,
    };
    GraphMix::new(config, dims)
}

/// Aggregate loss as a function of the main network's parameters.
pub struct AggregateLoss<'a> {
    pub model: &'a GraphMix,
    pub target: &'a ParamStore<f64>,
    pub batch: &'a [&'a Episode],
    pub cfg: LossConfig,
}

impl Objective for AggregateLoss<'_> {
    type Error = Error;

    fn build<T: Scalar>(&mut self, tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var, Error> {
        let target = self.target.cast::<T>();
        Ok(compute_losses(tape, self.model, params, &target, self.batch, &self.cfg)?.total)
    }
}

/// Finite-difference step of the gradient suite.
pub const GRAD_EPS: f64 = 1e-9;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Analytic gradient of the aggregate loss against double-double central
/// differences,
/// over every trainable entry, on reduced-width models with 2–3 agents and
/// batches of two padded synthetic episodes of at most 5 steps.
pub fn grad_suite(seed: u64) -> Result<SuiteReport, Error> {
    let mut rng = stream(seed, Stream::Verify);
    let dims = ModelDims { obs_dim: 3, n_actions: 3, state_dim: 4 };
    let cases = [
        (MixerVariant::Gin, 1, true, 2, [3, 2]),
        (MixerVariant::Gin, 2, true, 3, [5, 3]),
        (MixerVariant::Gcn, 1, true, 3, [4, 5]),
        (MixerVariant::Gin, 1, false, 2, [3, 1]),
    ];
    let mut worst = 0.0f64;
    let mut where_ = String::new();
    let mut checked = 0;
    let mut kinks = 0;
    for (i, &(variant, layers, attention, m, lens)) in cases.iter().enumerate() {
        let model = small_model(variant, layers, attention, dims)?;
        let params = random_params(&model, &mut rng, 1.0);
        let target = random_params(&model, &mut rng, 1.0);
        let spec = EnvSpec { n_agents: m, obs_dim: 3, state_dim: 4, n_actions: 3, episode_limit: 5, gamma: 0.9 };
        let episodes: Vec<Episode> = lens.iter().map(|&t| synthetic_episode(&mut rng, &spec, t)).collect();
        let batch: Vec<&Episode> = episodes.iter().collect();
        let cfg = LossConfig { gamma: spec.gamma, lambda_local: 1.0 };
        let mut loss = AggregateLoss { model: &model, target: &target, batch: &batch, cfg };
        let report = reference_diff_check(&mut loss, &params, GRAD_EPS)?;
        checked += report.checked;
        kinks += report.at_kinks;
        if report.max_rel_error >= worst {
            worst = report.max_rel_error;
            if let Some((name, idx)) = report.worst {
                where_ = format!("worst at case {i} `{name}`[{idx}]");
            }
        }
    }
    Ok(SuiteReport {
        suite: Suite::Grad,
        cases: checked,
        value: worst,
        label: "max relative error",
        passed: worst <= GRAD_TOLERANCE,
        detail: format!("{} models, eps {GRAD_EPS:e}, {kinks} entries on kinks, {where_}", cases.len()),
    })
}

fn default_dims() -> ModelDims {
    ModelDims { obs_dim: 4, n_actions: 4, state_dim: 6 }
}

/// Models covering every monotone mixer family.
fn mixer_models() -> Result<Vec<GraphMix>, Error> {
    let mut out = Vec::new();
    for (variant, layers) in [(MixerVariant::Gin, 1), (MixerVariant::Gin, 2), (MixerVariant::Gcn, 1), (MixerVariant::Gcn, 2)] {
        let config = ModelConfig { mixer: variant, gnn_layers: layers, ..ModelConfig::default() };
        out.push(GraphMix::new(config, default_dims())?);
    }
    Ok(out)
}

/// Central-difference slope of Q_tot in each agent Q over random states,
/// edges, Q-values and alive masks.
pub fn monotone_suite(seed: u64, draws: usize) -> Result<SuiteReport, Error> {
    const H: f64 = 1e-4;
    let mut rng = stream(seed, Stream::Verify);
    let models = mixer_models()?;
    let params: Vec<ParamStore<f64>> = models.iter().map(|m| random_params(m, &mut rng, 2.0)).collect();
    let mut min_slope = f64::INFINITY;
    let mut probes = 0;
    for draw in 0..draws {
        let k = draw % models.len();
        let model = &models[k];
        let m = rng.random_range(1..=6);
        let alive = random_alive(&mut rng, m);
        let edges = random_edges(&mut rng, &alive)?;
        let state: Vec<f64> = (0..model.dims().state_dim).map(|_| gauss(&mut rng, 1.0)).collect();
        let q: Vec<f64> = (0..m).map(|_| gauss(&mut rng, 3.0)).collect();
        for v in 0..m {
            let mut up = q.clone();
            up[v] += H;
            let mut down = q.clone();
            down[v] -= H;
            let hi = model.q_tot(&params[k], &up, &edges, &state, &alive)?.q_tot;
            let lo = model.q_tot(&params[k], &down, &edges, &state, &alive)?.q_tot;
            min_slope = min_slope.min((hi - lo) / (2.0 * H));
            probes += 1;
        }
    }
    Ok(SuiteReport {
        suite: Suite::Monotone,
        cases: draws,
        value: min_slope,
        label: "min slope",
        passed: min_slope >= -1e-9,
        detail: format!("{probes} agent slots probed, step {H:e}"),
    })
}

/// Q_tot of every joint action over alive agents' available actions.
fn exhaustive_max(
    model: &GraphMix,
    params: &ParamStore<f64>,
    q: &[f64],
    edges: &Tensor<f64>,
    state: &[f64],
    alive: &[bool],
    avail: &[bool],
) -> Result<f64, Error> {
    let a = model.dims().n_actions;
    let m = alive.len();
    let options: Vec<Vec<usize>> =
        (0..m).map(|v| if alive[v] { (0..a).filter(|&i| avail[v * a + i]).collect() } else { vec![NOOP] }).collect();
    let mut idx = vec![0usize; m];
    let mut best = f64::NEG_INFINITY;
    loop {
        let chosen: Vec<f64> = (0..m).map(|v| q[v * a + options[v][idx[v]]]).collect();
        best = best.max(model.q_tot(params, &chosen, edges, state, alive)?.q_tot);
        let mut d = 0;
        while d < m {
            idx[d] += 1;
            if idx[d] < options[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == m {
            return Ok(best);
        }
    }
}

/// Per-agent greedy value against exhaustive enumeration of joint actions.
pub fn igm_suite(seed: u64, instances: usize) -> Result<SuiteReport, Error> {
    let mut rng = stream(seed, Stream::Verify);
    let models = mixer_models()?;
    let params: Vec<ParamStore<f64>> = models.iter().map(|m| random_params(m, &mut rng, 2.0)).collect();
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for i in 0..instances {
        let k = i % models.len();
        let model = &models[k];
        let a = model.dims().n_actions;
        let m = rng.random_range(1..=3);
        let alive = random_alive(&mut rng, m);
        let avail = random_avail(&mut rng, m, a, &alive);
        let edges = random_edges(&mut rng, &alive)?;
        let state: Vec<f64> = (0..model.dims().state_dim).map(|_| gauss(&mut rng, 1.0)).collect();
        // Occasional constant Q rows exercise ties.
        let constant = rng.random::<f64>() < 0.1;
        let q: Vec<f64> = (0..m * a).map(|_| if constant { 1.0 } else { gauss(&mut rng, 3.0) }).collect();
        let (greedy, _) = model.joint_greedy_value(&params[k], &q, &edges, &state, &alive, &avail)?;
        let best = exhaustive_max(model, &params[k], &q, &edges, &state, &alive, &avail)?;
        let gap = (greedy - best).abs();
        worst = worst.max(gap);
        if gap > 1e-9 {
            mismatches += 1;
        }
    }
    Ok(SuiteReport {
        suite: Suite::Igm,
        cases: instances,
        value: worst,
        label: "max |greedy - exhaustive|",
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches"),
    })
}

/// α and attention normalizations over random masks and team sizes.
pub fn masks_suite(seed: u64, draws: usize) -> Result<SuiteReport, Error> {
    let mut rng = stream(seed, Stream::Verify);
    let models = mixer_models()?;
    let params: Vec<ParamStore<f64>> = models.iter().map(|m| random_params(m, &mut rng, 2.0)).collect();
    let d = models[0].config().agent_hidden;
    let mut worst = 0.0f64;
    for i in 0..draws {
        let k = i % models.len();
        let model = &models[k];
        let m = rng.random_range(1..=6);
        let alive = random_alive(&mut rng, m);
        let mut tape = Tape::<f64>::verifying();
        let vars = model.bind(&mut tape, &params[k], true)?;
        let hidden: Vec<f64> = (0..m * d).map(|_| gauss(&mut rng, 1.0)).collect();
        let h = tape.constant(Tensor::from_f64(&[1, m, d], &hidden)?)?;
        let w = model.edges(&mut tape, &vars, h, &alive)?;
        let edges = EdgeWeights::from_batch(tape.value(w), 0);
        for v in 0..m {
            for u in 0..m {
                if !(alive[u] && alive[v]) && edges.get(u, v) != 0.0 {
                    worst = f64::INFINITY;
                }
            }
            if alive[v] {
                worst = worst.max((edges.outgoing_sum(v) - 1.0).abs());
            }
        }
        let state: Vec<f64> = (0..model.dims().state_dim).map(|_| gauss(&mut rng, 1.0)).collect();
        let q: Vec<f64> = (0..m).map(|_| gauss(&mut rng, 3.0)).collect();
        let out = model.q_tot(&params[k], &q, tape.value(w), &state, &alive)?;
        let mut sum = 0.0;
        for (&is_alive, &a) in alive.iter().zip(&out.alpha) {
            if is_alive {
                sum += a;
            } else if a != 0.0 {
                worst = f64::INFINITY;
            }
        }
        worst = worst.max((sum - 1.0).abs());
    }
    Ok(SuiteReport {
        suite: Suite::Masks,
        cases: draws,
        value: worst,
        label: "max normalization error",
        passed: worst <= 1e-9,
        detail: String::from("alpha and outgoing edge sums on alive agents; dead entries exactly zero"),
    })
}

/// VDN-degenerate mixer against the plain sum of alive agent Qs.
pub fn vdn_reduction(seed: u64, draws: usize) -> Result<SuiteReport, Error> {
    let mut rng = stream(seed, Stream::Verify);
    let config = ModelConfig { mixer: MixerVariant::Vdn, ..ModelConfig::default() };
    let model = GraphMix::new(config, default_dims())?;
    let params = random_params(&model, &mut rng, 1.0);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let m = rng.random_range(1..=6);
        let alive = random_alive(&mut rng, m);
        let edges = graphattn::uniform_edge_weights::<f64>(&alive, m)?;
        let state: Vec<f64> = (0..model.dims().state_dim).map(|_| gauss(&mut rng, 1.0)).collect();
        let q: Vec<f64> = (0..m).map(|_| gauss(&mut rng, 5.0)).collect();
        let expected: f64 = q.iter().zip(&alive).filter(|(_, &a)| a).map(|(x, _)| x).sum();
        let got = model.q_tot(&params, &q, &edges, &state, &alive)?.q_tot;
        worst = worst.max((got - expected).abs());
    }
    Ok(SuiteReport {
        suite: Suite::Vdn,
        cases: draws,
        value: worst,
        label: "max |Q_tot - sum of alive Q|",
        passed: worst <= 1e-6,
        detail: String::from("uniform edges, identity mixer"),
    })
}
