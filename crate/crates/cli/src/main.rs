use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qatten_core::envs::load_env;
use qatten_core::trainer::{eval_seeds, evaluate};
use qatten_lab::attention::{export_attention, write_exports};
use qatten_lab::checkpoint::load_checkpoint;
use qatten_lab::config::parse_config;
use qatten_lab::report::{verify_theory, write_report};
use qatten_lab::run::{train_run, RunPaths};
use qatten_lab::{output_root, CliError, Result};

#[derive(Parser)]
#[command(name = "qatten-lab", version, about = "Attention-based value decomposition lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config.
    Train {
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint on the config's environment.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Episodes (defaults to the config's eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the decomposition and IGM checks and write a JSON report.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        suite_seed: u64,
        /// Report path (default: theory_report.json under the output root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-step attention weights of greedy episodes as CSV.
    ExportAttention {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the run's attention directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the optimal expected return of an environment file.
    Oracle {
        env: PathBuf,
        /// Reset seed (only matters for randomized spawns).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Discount (default: the file's own, else 0.99).
        #[arg(long)]
        gamma: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let config = parse_config(&config)?;
            let summary = train_run(&config, resume.as_deref())?;
            if let Some(row) = summary.last {
                println!(
                    "step {} median return {} win rate {}",
                    row.step, row.median_return, row.win_rate
                );
            }
            println!("run directory: {}", summary.dir.display());
        }
        Command::Eval {
            checkpoint,
            config,
            episodes,
        } => {
            let config = parse_config(&config)?;
            let env = config.load_env()?;
            let snapshot = load_checkpoint(&checkpoint)?;
            let n = episodes.unwrap_or(config.train.eval_episodes);
            let seeds = eval_seeds(config.train.seed, 0, n);
            let m = evaluate(&snapshot.learner.agent, &snapshot.learner.params, &env, &seeds)?;
            println!("{}", serde_json::to_string(&m).expect("metrics serialize"));
        }
        Command::VerifyTheory { suite_seed, out } => {
            let report = verify_theory(suite_seed)?;
            let path = out.unwrap_or_else(|| output_root().join("theory_report.json"));
            write_report(&path, &report)?;
            for (name, passed, asserted) in report.summary() {
                if asserted > 0 {
                    println!("{name}: {passed}/{asserted} passed");
                } else {
                    println!("{name}: reported");
                }
            }
            println!("report: {}", path.display());
            if !report.passed {
                return Err(CliError::Failed("some asserted checks failed".into()));
            }
        }
        Command::ExportAttention {
            checkpoint,
            config,
            episodes,
            seed,
            out,
        } => {
            let config = parse_config(&config)?;
            let env = config.load_env()?;
            let snapshot = load_checkpoint(&checkpoint)?;
            let exports = export_attention(&snapshot.learner, &env, episodes, seed.unwrap_or(config.train.seed))?;
            let dir = out.unwrap_or_else(|| RunPaths::new(&config.output_dir).attention());
            for path in write_exports(&dir, &exports)? {
                println!("{}", path.display());
            }
        }
        Command::Oracle { env, seed, gamma } => {
            let spec = load_env(&env)?;
            let gamma = gamma.or(spec.gamma()).unwrap_or(0.99);
            let result = spec.oracle_optimal(gamma, seed)?;
            println!("{}", result.value);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
