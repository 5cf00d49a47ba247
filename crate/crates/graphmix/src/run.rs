//! The train, eval, finetune and verify commands.

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use graphmix_core::envs::Environment;
use graphmix_core::trainer::{self, EvalRow, EvalStats, Observer, TrainRow, Trainer};
use graphmix_core::verify::{self, Suite, SuiteReport};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::metrics::{self, MetricsWriter};
use crate::Error;

pub const CHECKPOINT: &str = "checkpoint.gmxc";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ABORT_CHECKPOINT: &str = "abort.gmxc";
pub const ABORT_REPORT: &str = "abort.json";
pub const FINETUNE_CSV: &str = "finetune.csv";
pub const EVALUATION_CSV: &str = "evaluation.csv";

pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: u64,
    /// Overrides `io.out_dir`.
    pub out: Option<PathBuf>,
    /// Continue from `checkpoint.gmxc` in the output directory.
    pub resume: bool,
    /// Print evaluations to stderr.
    pub progress: bool,
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    /// Defaults to `train.eval_episodes`.
    pub episodes: Option<usize>,
    /// Defaults to the seed the checkpoint was trained with.
    pub seed: Option<u64>,
    /// Directory for `evaluation.csv`; nothing is written when absent.
    pub out: Option<PathBuf>,
}

pub struct FinetuneArgs {
    pub checkpoint: PathBuf,
    /// Config of the target environment.
    pub config: PathBuf,
    /// Defaults to `train.total_steps`.
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub progress: bool,
}

/// Writes metrics and checkpoints as the trainer reports progress.
struct Recorder<'a> {
    out: &'a Path,
    metrics: MetricsWriter,
    checkpoint_evals: u64,
    evals: u64,
    progress: bool,
    error: Option<Error>,
}

impl Recorder<'_> {
    fn check(&mut self, r: Result<(), Error>) -> ControlFlow<()> {
        match r {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                self.error = Some(e);
                ControlFlow::Break(())
            }
        }
    }
}

impl Observer for Recorder<'_> {
    fn on_episode(&mut self, _: &Trainer, row: &TrainRow) -> ControlFlow<()> {
        let r = self.metrics.train_row(row);
        self.check(r)
    }

    fn on_eval(&mut self, trainer: &Trainer, row: &EvalRow) -> ControlFlow<()> {
        if self.progress {
            let s = &row.stats;
            eprintln!("step {:>8}  success {:.3}  return {:.3}  len {:.1}", row.env_steps, s.success_rate, s.mean_return, s.mean_len);
        }
        let mut r = self.metrics.eval_row(row);
        self.evals += 1;
        if r.is_ok() && self.evals.is_multiple_of(self.checkpoint_evals) {
            r = save_checkpoint(self.out, trainer);
        }
        self.check(r)
    }
}

fn save_checkpoint(out: &Path, trainer: &Trainer) -> Result<(), Error> {
    let ckpt = Checkpoint::of(trainer);
    let step = out.join(CHECKPOINT_DIR).join(format!("step_{:010}.gmxc", ckpt.meta.env_steps));
    ckpt.save(&step)?;
    ckpt.save(&out.join(CHECKPOINT))
}

/// Runs `trainer` with `recorder`, dumping the learner state if the loss
/// turns non-finite.
fn drive(trainer: &mut Trainer, recorder: &mut Recorder) -> Result<trainer::RunSummary, Error> {
    let result = trainer.run(recorder);
    recorder.metrics.flush()?;
    if let Some(e) = recorder.error.take() {
        return Err(e);
    }
    match result {
        Err(e @ graphmix_core::Error::NonFiniteLoss { .. }) => {
            let out = recorder.out;
            Checkpoint::of(trainer).save(&out.join(ABORT_CHECKPOINT))?;
            let c = trainer.counters();
            let report = json!({"error": e.to_string(), "episodes": c.episodes, "env_steps": c.env_steps, "updates": c.updates});
            let path = out.join(ABORT_REPORT);
            fs::write(&path, format!("{report}\n")).map_err(Error::write(&path))?;
            Err(e.into())
        }
        other => Ok(other?),
    }
}

fn resolve_out(out: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    out.unwrap_or_else(|| config.io.out_dir.clone())
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub out: PathBuf,
    pub evals: Vec<EvalRow>,
}

pub fn train(args: TrainArgs) -> Result<TrainOutcome, Error> {
    let config = RunConfig::load(&args.config)?;
    let out = resolve_out(args.out, &config);
    let env = config.env.build()?;
    let model = config.model_for(&env)?;
    let mut trainer = Trainer::new(model, config.train.clone(), env, args.seed)?;
    let metrics = if args.resume {
        let ckpt = Checkpoint::load(&out.join(CHECKPOINT))?;
        let manifest = metrics::read_manifest(&out)?;
        if manifest["config"] != config.to_json() || manifest["seed"] != json!(args.seed) {
            return Err(Error::Invalid(format!("config or seed differs from the run in {}", out.display())));
        }
        let m = &ckpt.meta;
        let (counters, rngs) = (m.counters(), m.rng_positions());
        trainer.restore(ckpt.params, ckpt.target, ckpt.optim, counters, rngs)?;
        if counters.env_steps >= config.train.total_steps {
            return Ok(TrainOutcome { out, evals: Vec::new() });
        }
        metrics::append_manifest(&out, &json!({"resume": {"episodes": counters.episodes, "env_steps": counters.env_steps}}))?;
        MetricsWriter::resume(&out, counters.episodes, counters.env_steps)?
    } else {
        metrics::write_manifest(&out, &json!({"command": "train", "seed": args.seed, "config": config.to_json()}))?;
        MetricsWriter::create(&out)?
    };
    let mut recorder =
        Recorder { out: &out, metrics, checkpoint_evals: config.io.checkpoint_evals, evals: 0, progress: args.progress, error: None };
    let summary = drive(&mut trainer, &mut recorder)?;
    save_checkpoint(&out, &trainer)?;
    Ok(TrainOutcome { out, evals: summary.evals })
}

fn load_matching(path: &Path, config: &RunConfig) -> Result<(Checkpoint, graphmix_core::envs::Env), Error> {
    let ckpt = Checkpoint::load(path)?;
    let env = config.env.build()?;
    let model = config.model_for(&env)?;
    model.check_params(&ckpt.params)?;
    Ok((ckpt, env))
}

pub fn eval(args: EvalArgs) -> Result<EvalStats, Error> {
    if args.episodes == Some(0) {
        return Err(Error::Invalid("--episodes must be positive".into()));
    }
    let config = RunConfig::load(&args.config)?;
    let (ckpt, mut env) = load_matching(&args.checkpoint, &config)?;
    let model = config.model_for(&env)?;
    let episodes = args.episodes.unwrap_or(config.train.eval_episodes);
    let seed = args.seed.unwrap_or(ckpt.meta.seed);
    let stats = trainer::evaluate(&mut env, &model, &ckpt.params, episodes, seed)?;
    if let Some(out) = args.out {
        fs::create_dir_all(&out).map_err(Error::write(&out))?;
        let cells = [
            episodes.to_string(),
            seed.to_string(),
            stats.success_rate.to_string(),
            stats.mean_return.to_string(),
            stats.mean_len.to_string(),
        ];
        let header = ["episodes", "seed", "success_rate", "mean_return", "mean_len"];
        metrics::write_table(&out.join(EVALUATION_CSV), &header, &cells)?;
    }
    Ok(stats)
}

/// Result of a fine-tuning run.
#[derive(Debug)]
pub struct FinetuneOutcome {
    pub out: PathBuf,
    pub before: EvalStats,
    pub after: EvalStats,
}

pub const FINETUNE_HEADER: [&str; 8] = [
    "seed",
    "steps",
    "before_success_rate",
    "after_success_rate",
    "before_mean_return",
    "after_mean_return",
    "before_mean_len",
    "after_mean_len",
];

/// Fine-tunes a checkpoint on the environment of `args.config`. The
/// architecture comes from the checkpoint; the config supplies the
/// environment and training settings.
pub fn finetune(args: FinetuneArgs) -> Result<FinetuneOutcome, Error> {
    let mut config = RunConfig::load(&args.config)?;
    let out = resolve_out(args.out, &config);
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let env = config.env.build()?;
    let model = ckpt.meta.model()?;
    trainer::check_transfer(&model, env.spec())?;
    model.check_params(&ckpt.params)?;
    if let Some(steps) = args.steps {
        config.train.total_steps = steps;
    }
    config.model = ckpt.meta.model.clone();
    let seed = args.seed.unwrap_or(ckpt.meta.seed);
    let source = json!({"seed": ckpt.meta.seed, "n_agents": ckpt.meta.n_agents, "env_steps": ckpt.meta.env_steps});
    metrics::write_manifest(&out, &json!({"command": "finetune", "seed": seed, "source": source, "config": config.to_json()}))?;
    let metrics = MetricsWriter::create(&out)?;
    let mut recorder =
        Recorder { out: &out, metrics, checkpoint_evals: config.io.checkpoint_evals, evals: 0, progress: args.progress, error: None };
    let result = trainer::finetune(model, ckpt.params, env, config.train.clone(), seed, &mut recorder);
    recorder.metrics.flush()?;
    if let Some(e) = recorder.error.take() {
        return Err(e);
    }
    let (trainer, report) = result?;
    save_checkpoint(&out, &trainer)?;
    let (b, a) = (&report.before, &report.after);
    let cells = [
        seed.to_string(),
        config.train.total_steps.to_string(),
        b.success_rate.to_string(),
        a.success_rate.to_string(),
        b.mean_return.to_string(),
        a.mean_return.to_string(),
        b.mean_len.to_string(),
        a.mean_len.to_string(),
    ];
    metrics::write_table(&out.join(FINETUNE_CSV), &FINETUNE_HEADER, &cells)?;
    Ok(FinetuneOutcome { out, before: report.before, after: report.after })
}

/// Runs each suite in turn.
pub fn verify(suites: &[Suite], seed: u64) -> Result<Vec<SuiteReport>, Error> {
    suites.iter().map(|&s| Ok(verify::run_suite(s, seed)?)).collect()
}
