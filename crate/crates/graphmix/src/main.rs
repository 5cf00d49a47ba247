use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use graphmix::run::{self, EvalArgs, FinetuneArgs, TrainArgs};
use graphmix_core::verify::Suite;

#[derive(Parser)]
#[command(name = "graphmix", version, about = "Train and evaluate GraphMIX value factorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, or continue an interrupted run.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; overrides `io.out_dir`.
        #[arg(long, env = "GRAPHMIX_OUT")]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Number of episodes; defaults to `train.eval_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Evaluation seed; defaults to the checkpoint's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for `evaluation.csv`.
        #[arg(long, env = "GRAPHMIX_OUT")]
        out: Option<PathBuf>,
    },
    /// Continue training a checkpoint on a team of a different size.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config of the target environment.
        #[arg(long)]
        config: PathBuf,
        /// Fine-tuning steps; defaults to `train.total_steps`.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "GRAPHMIX_OUT")]
        out: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Run a property suite at 64-bit precision.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    Grad,
    Monotone,
    Igm,
    Masks,
    Vdn,
    All,
}

impl SuiteArg {
    fn suites(self) -> Vec<Suite> {
        match self {
            SuiteArg::Grad => vec![Suite::Grad],
            SuiteArg::Monotone => vec![Suite::Monotone],
            SuiteArg::Igm => vec![Suite::Igm],
            SuiteArg::Masks => vec![Suite::Masks],
            SuiteArg::Vdn => vec![Suite::Vdn],
            SuiteArg::All => Suite::ALL.to_vec(),
        }
    }
}

fn execute(command: Command) -> Result<bool, graphmix::Error> {
    match command {
        Command::Train { config, seed, out, resume, quiet } => {
            let outcome = run::train(TrainArgs { config, seed, out, resume, progress: !quiet })?;
            if let Some(last) = outcome.evals.last() {
                println!("final success {:.3} return {:.4}", last.stats.success_rate, last.stats.mean_return);
            }
            println!("wrote {}", outcome.out.display());
        }
        Command::Eval { checkpoint, config, episodes, seed, out } => {
            let s = run::eval(EvalArgs { checkpoint, config, episodes, seed, out })?;
            println!("episodes {} success_rate {} mean_return {} mean_len {}", s.episodes, s.success_rate, s.mean_return, s.mean_len);
        }
        Command::Finetune { checkpoint, config, steps, seed, out, quiet } => {
            let o = run::finetune(FinetuneArgs { checkpoint, config, steps, seed, out, progress: !quiet })?;
            println!("before success {:.3} return {:.4}", o.before.success_rate, o.before.mean_return);
            println!("after  success {:.3} return {:.4}", o.after.success_rate, o.after.mean_return);
            println!("wrote {}", o.out.display());
        }
        Command::Verify { suite, seed } => {
            let reports = run::verify(&suite.suites(), seed)?;
            for r in &reports {
                println!("{r}");
            }
            return Ok(reports.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
