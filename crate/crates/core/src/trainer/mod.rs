//! Episode replay, target networks, the aggregate TD loss and the training
//! and evaluation loops.

mod buffer;
mod losses;
mod optim;
mod rollout;

use alloc::format;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::RngCore as _;

pub use buffer::{Episode, ReplayBuffer};
pub use losses::{compute_losses, unroll, LossConfig, Losses};
pub use optim::{clip_global_norm, RmsProp};
pub use rollout::{evaluate, evaluate_policy, rollout_episode, AgentPolicy, EvalStats, Policy};

use crate::agent::EpsilonSchedule;
use crate::diff::{ParamStore, Tape};
use crate::envs::{EnvSpec, Environment};
use crate::model::GraphMix;
use crate::rng::{stream, Rng, Stream};
use crate::Error;

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub lr: f64,
    /// Weight of the summed per-agent local losses.
    pub lambda_local: f64,
    pub batch_size: usize,
    pub buffer_size: usize,
    /// Target networks are synced every this many episodes.
    pub target_period: u64,
    /// Environment steps between evaluations.
    pub eval_period: u64,
    pub eval_episodes: usize,
    pub total_steps: u64,
    pub epsilon: EpsilonSchedule,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            lambda_local: 1.0,
            batch_size: 32,
            buffer_size: 5000,
            target_period: 200,
            eval_period: 20_000,
            eval_episodes: 32,
            total_steps: 200_000,
            epsilon: EpsilonSchedule::default(),
            rms_alpha: 0.99,
            rms_eps: 1e-5,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |what: &str| Err(Error::Config(what.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("`lr` must be finite and non-negative");
        }
        if !(self.lambda_local >= 0.0 && self.lambda_local.is_finite()) {
            return bad("`lambda_local` must be finite and non-negative");
        }
        if self.batch_size == 0 || self.buffer_size < self.batch_size {
            return bad("`batch_size` must be positive and no larger than `buffer_size`");
        }
        if self.target_period == 0 || self.eval_period == 0 || self.eval_episodes == 0 {
            return bad("periods and `eval_episodes` must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon.start) || !(0.0..=1.0).contains(&self.epsilon.end) {
            return bad("epsilon values must lie in [0, 1]");
        }
        let positive = |x: f64| x > 0.0;
        if !positive(self.grad_clip) || !(0.0..1.0).contains(&self.rms_alpha) || !positive(self.rms_eps) {
            return bad("optimizer settings out of range");
        }
        Ok(())
    }
}

/// Loss statistics of one gradient step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub loss_global: f64,
    pub loss_local_mean: f64,
    pub grad_norm: f64,
}

/// One row of the per-episode training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRow {
    pub episode: u64,
    pub env_steps: u64,
    /// `None` until the buffer holds a full batch.
    pub losses: Option<StepStats>,
    pub epsilon: f64,
}

/// One row of the evaluation log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub env_steps: u64,
    pub stats: EvalStats,
}

/// Progress counters, persisted with checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub episodes: u64,
    pub env_steps: u64,
    pub updates: u64,
    /// Step count at which the next evaluation is due.
    pub next_eval: u64,
}

/// Word positions of the run's random streams, persisted with checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngPositions {
    pub env: u128,
    pub explore: u128,
    pub sampling: u128,
}

/// Hooks called by [`Trainer::run`]. Returning `Break` stops the run
/// after the current episode.
pub trait Observer {
    fn on_episode(&mut self, _trainer: &Trainer, _row: &TrainRow) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_eval(&mut self, _trainer: &Trainer, _row: &EvalRow) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl Observer for NoObserver {}

/// Outcome of [`Trainer::run`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub evals: Vec<EvalRow>,
    pub stopped_early: bool,
}

/// Complete learner state: main and target parameters, optimizer, buffer,
/// counters and random streams. Training runs at 32-bit precision.
pub struct Trainer {
    model: GraphMix,
    config: TrainConfig,
    seed: u64,
    env: crate::envs::Env,
    eval_env: crate::envs::Env,
    params: ParamStore<f32>,
    target: ParamStore<f32>,
    optim: RmsProp<f32>,
    buffer: ReplayBuffer,
    counters: Counters,
    env_rng: Rng,
    explore_rng: Rng,
    sample_rng: Rng,
}

/// Dimensions the parameters must agree on when moving between
/// environments.
pub fn check_transfer(model: &GraphMix, spec: &EnvSpec) -> Result<(), Error> {
    let d = model.dims();
    for (field, expected, found) in
        [("obs_dim", d.obs_dim, spec.obs_dim), ("n_actions", d.n_actions, spec.n_actions), ("state_dim", d.state_dim, spec.state_dim)]
    {
        if expected != found {
            return Err(Error::DimMismatch { field, expected, found });
        }
    }
    if spec.n_agents > model.config().max_agents {
        return Err(Error::DimMismatch { field: "max_agents", expected: model.config().max_agents, found: spec.n_agents });
    }
    Ok(())
}

impl Trainer {
    /// Fresh learner with parameters initialized from the `Init` stream.
    pub fn new(model: GraphMix, config: TrainConfig, env: crate::envs::Env, seed: u64) -> Result<Self, Error> {
        let params = model.init_params::<f32>(&mut stream(seed, Stream::Init));
        Self::with_params(model, config, env, seed, params)
    }

    /// Learner starting from given parameters, with fresh target copies,
    /// optimizer, buffer and counters.
    pub fn with_params(
        model: GraphMix,
        config: TrainConfig,
        env: crate::envs::Env,
        seed: u64,
        params: ParamStore<f32>,
    ) -> Result<Self, Error> {
        config.validate()?;
        check_transfer(&model, env.spec())?;
        model.check_params(&params)?;
        let target = params.clone();
        Ok(Trainer {
            optim: RmsProp::new(config.lr, config.rms_alpha, config.rms_eps),
            buffer: ReplayBuffer::new(config.buffer_size),
            eval_env: env.clone(),
            env,
            model,
            config,
            seed,
            params,
            target,
            counters: Counters::default(),
            env_rng: stream(seed, Stream::Env),
            explore_rng: stream(seed, Stream::Explore),
            sample_rng: stream(seed, Stream::Sampling),
        })
    }

    pub fn model(&self) -> &GraphMix {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn env_spec(&self) -> &EnvSpec {
        self.env.spec()
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn target(&self) -> &ParamStore<f32> {
        &self.target
    }

    pub fn optimizer(&self) -> &RmsProp<f32> {
        &self.optim
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn rng_positions(&self) -> RngPositions {
        RngPositions {
            env: self.env_rng.get_word_pos(),
            explore: self.explore_rng.get_word_pos(),
            sampling: self.sample_rng.get_word_pos(),
        }
    }

    /// Restores a saved state; the replay buffer starts empty.
    pub fn restore(
        &mut self,
        params: ParamStore<f32>,
        target: ParamStore<f32>,
        optim_state: Vec<(alloc::string::String, Vec<f32>)>,
        counters: Counters,
        rngs: RngPositions,
    ) -> Result<(), Error> {
        self.model.check_params(&params)?;
        self.model.check_params(&target)?;
        for (name, values) in optim_state {
            let p = params.get(&name)?;
            if p.len() != values.len() {
                return Err(Error::DimMismatch { field: "optimizer state", expected: p.len(), found: values.len() });
            }
            self.optim.set_state(&name, values);
        }
        self.params = params;
        self.target = target;
        self.counters = counters;
        self.env_rng.set_word_pos(rngs.env);
        self.explore_rng.set_word_pos(rngs.explore);
        self.sample_rng.set_word_pos(rngs.sampling);
        Ok(())
    }

    /// Copies the main parameters into the target networks.
    pub fn sync_target(&mut self) -> Result<(), Error> {
        Ok(self.target.copy_from(&self.params)?)
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon.value(self.counters.env_steps)
    }

    /// Plays one ε-greedy training episode; `store` appends it to the buffer.
    pub fn collect_episode(&mut self, store: bool) -> Result<Episode, Error> {
        let mut policy = AgentPolicy::new(&self.model, &self.params, self.epsilon());
        let seed = self.env_rng.next_u64();
        let ep = rollout_episode(&mut self.env, &mut policy, seed, &mut self.explore_rng)?;
        if store {
            self.buffer.push(ep.clone());
        }
        Ok(ep)
    }

    /// Adds an externally produced episode to the buffer.
    pub fn push_episode(&mut self, episode: Episode) {
        self.buffer.push(episode);
    }

    /// One gradient step on a sampled batch.
    pub fn train_step(&mut self) -> Result<StepStats, Error> {
        let batch = self.buffer.sample(self.config.batch_size, &mut self.sample_rng)?;
        let cfg = LossConfig { gamma: self.env.spec().gamma, lambda_local: self.config.lambda_local };
        let mut tape = Tape::new();
        let losses = compute_losses(&mut tape, &self.model, &self.params, &self.target, &batch, &cfg)?;
        let loss = tape.value(losses.total).data()[0] as f64;
        let episode = self.counters.episodes;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                episode,
                detail: format!("loss {loss}, global {}, local {:?}", losses.global_sum, losses.local_sums),
            });
        }
        let mut grads = tape.backward(losses.total)?.into_gradients(&self.params);
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss { episode, detail: format!("non-finite gradient, norm {grad_norm}") });
        }
        self.optim.step(&mut self.params, &grads)?;
        self.counters.updates += 1;
        Ok(StepStats { loss, loss_global: losses.loss_global(), loss_local_mean: losses.loss_local_mean(), grad_norm })
    }

    /// Greedy evaluation on the evaluation episode seeds of this run.
    pub fn evaluate(&mut self) -> Result<EvalStats, Error> {
        evaluate(&mut self.eval_env, &self.model, &self.params, self.config.eval_episodes, self.seed)
    }

    /// One iteration: collect, train when the buffer allows, sync targets.
    pub fn train_episode(&mut self) -> Result<TrainRow, Error> {
        let epsilon = self.epsilon();
        let ep = self.collect_episode(true)?;
        self.counters.episodes += 1;
        self.counters.env_steps += ep.len as u64;
        let losses = if self.buffer.len() >= self.config.batch_size { Some(self.train_step()?) } else { None };
        if self.counters.episodes.is_multiple_of(self.config.target_period) {
            self.sync_target()?;
        }
        Ok(TrainRow { episode: self.counters.episodes, env_steps: self.counters.env_steps, losses, epsilon })
    }

    fn eval_row<O: Observer + ?Sized>(&mut self, observer: &mut O, summary: &mut RunSummary) -> Result<bool, Error> {
        let stats = self.evaluate()?;
        let row = EvalRow { env_steps: self.counters.env_steps, stats };
        summary.evals.push(row);
        Ok(observer.on_eval(self, &row).is_break())
    }

    /// Trains until `total_steps` more environment steps than at the last
    /// reset of the counters have been taken, evaluating every
    /// `eval_period` steps (starting at step 0) and once at the end.
    pub fn run<O: Observer + ?Sized>(&mut self, observer: &mut O) -> Result<RunSummary, Error> {
        let mut summary = RunSummary { evals: Vec::new(), stopped_early: false };
        let total = self.config.total_steps;
        let mut last_eval = None;
        while self.counters.env_steps < total {
            if self.counters.env_steps >= self.counters.next_eval {
                self.counters.next_eval += self.config.eval_period;
                last_eval = Some(self.counters.env_steps);
                if self.eval_row(observer, &mut summary)? {
                    summary.stopped_early = true;
                    return Ok(summary);
                }
            }
            let row = self.train_episode()?;
            if observer.on_episode(self, &row).is_break() {
                summary.stopped_early = true;
                return Ok(summary);
            }
        }
        if total > 0 && last_eval != Some(self.counters.env_steps) {
            self.counters.next_eval = self.counters.env_steps + self.config.eval_period;
            if self.eval_row(observer, &mut summary)? {
                summary.stopped_early = true;
            }
        }
        Ok(summary)
    }
}

/// Before/after evaluation of a fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    /// Direct transfer: the loaded parameters evaluated on the new team.
    pub before: EvalStats,
    pub after: EvalStats,
    pub summary: RunSummary,
}

/// Continues training `params` on an environment with a different team
/// size. Parameters load unchanged; `config.total_steps` is the number of
/// fine-tuning steps.
pub fn finetune<O: Observer + ?Sized>(
    model: GraphMix,
    params: ParamStore<f32>,
    env: crate::envs::Env,
    config: TrainConfig,
    seed: u64,
    observer: &mut O,
) -> Result<(Trainer, FinetuneReport), Error> {
    let mut trainer = Trainer::with_params(model, config, env, seed, params)?;
    let before = trainer.evaluate()?;
    let summary = if trainer.config.total_steps > 0 {
        // The step-0 evaluation of `run` repeats `before`; skip it.
        trainer.counters.next_eval = trainer.config.eval_period;
        trainer.run(observer)?
    } else {
        RunSummary { evals: Vec::new(), stopped_early: false }
    };
    let after = trainer.evaluate()?;
    Ok((trainer, FinetuneReport { before, after, summary }))
}
