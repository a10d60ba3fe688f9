use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gleet::env::RewardKind;
use gleet::harness::CrossSetting;
use gleet_cli::commands::{self, EvaluateArgs};
use gleet_cli::{CliError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "gleet", version, about = "Learned per-individual hyperparameter control for PSO and DE")]
struct Cli {
    /// JSON experiment configuration; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field by dotted path, e.g. `trainer.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for rollouts and evaluation; 1 is bit-reproducible.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    Static,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the train/test problem set as JSON.
    GenerateSuite {
        /// Output file (default `<output_dir>/suite.json`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy on the training split.
    Train {
        /// Continue from `<output_dir>/resume.json` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and/or the static baseline on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Regenerate the test instances at this dimension.
        #[arg(long)]
        override_dim: Option<usize>,
        #[arg(long)]
        override_population: Option<usize>,
        #[arg(long)]
        override_fe_max: Option<u64>,
        /// Also write one per-generation log per run under `episodes/`.
        #[arg(long)]
        episode_logs: bool,
        /// Output directory (default `<output_dir>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-derive rewards from episode logs and compare with the stored ones.
    Replay {
        /// An episode log or a directory of them.
        #[arg(long)]
        log: PathBuf,
        /// Reward kind used when the logs were written (default: config).
        #[arg(long)]
        reward: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.into()))?;
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenerateSuite { out } => {
            let path = commands::generate_suite(&cfg, out.as_deref())?;
            println!("{}", path.display());
        }
        Command::Train { resume } => {
            let path = commands::train(&cfg, resume)?;
            println!("{}", path.display());
        }
        Command::Evaluate {
            checkpoint,
            baseline,
            override_dim,
            override_population,
            override_fe_max,
            episode_logs,
            out,
        } => {
            let args = EvaluateArgs {
                checkpoint,
                static_baseline: baseline.is_some(),
                cross: CrossSetting {
                    dim: override_dim,
                    population: override_population,
                    fe_max: override_fe_max,
                },
                episode_logs,
                out,
            };
            let summary = commands::evaluate(&cfg, &args)?;
            for a in &summary.algorithms {
                println!("{}: mean final cost {:.6e} over {} runs", a.algorithm, a.mean_final_cost, a.runs);
            }
            if let Some(t) = &summary.rank_sum {
                println!("rank-sum {} vs {}: z = {:.4}, p = {:.4e}", t.first, t.second, t.z, t.p_value);
            }
        }
        Command::Replay { log, reward } => {
            let kind: RewardKind = match reward {
                Some(s) => s.parse()?,
                None => cfg.reward,
            };
            let report = commands::replay(&log, kind)?;
            for m in &report.mismatches {
                eprintln!("{m}");
            }
            println!(
                "replayed {} steps in {} files: {} mismatches",
                report.steps,
                report.files,
                report.mismatches.len()
            );
            if !report.mismatches.is_empty() {
                return Err(CliError::Runtime(anyhow::anyhow!("replayed rewards differ from the log")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
