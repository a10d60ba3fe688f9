//! The subcommands, as library functions so tests can drive them directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gleet::env::{episode_log_csv, parse_episode_log, replay_rewards, RewardKind};
use gleet::harness::{
    apply_cross_setting, evaluate_policy, export_results, mean_final_cost, rank_sum_test, run_static_baseline,
    CrossSetting, RunResult,
};
use gleet::policy::{Checkpoint, PolicyNetwork};
use gleet::ppo::{checkpoint_file, train as train_policy, TrainOutput};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes the configured problem set to `out` (default
/// `<output_dir>/suite.json`) and returns the path.
pub fn generate_suite(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let set = cfg.problem_set()?;
    let path = out.map_or_else(|| cfg.output_dir.join("suite.json"), Path::to_path_buf);
    write(&path, &set.to_json()?)?;
    log::info!(
        "wrote {} instances ({} train / {} test) to {}",
        set.instances.len(),
        set.train.len(),
        set.test.len(),
        path.display()
    );
    Ok(path)
}

/// Trains on the training split and returns the final checkpoint path.
/// The resolved configuration is saved next to the training artifacts.
pub fn train(cfg: &ExperimentConfig, resume: bool) -> Result<PathBuf, CliError> {
    let set = cfg.problem_set()?;
    let env_cfg = cfg.env_config()?;
    let net = PolicyNetwork::new(cfg.network_config()?, cfg.trainer.seed)?;
    let dir = cfg.output_dir.clone();
    let config_text = serde_json::to_string_pretty(cfg).context("serializing config")?;
    write(&dir.join("config.json"), &config_text)?;
    let train_set: Vec<_> = set.train_instances().cloned().collect();
    let out = TrainOutput {
        dir: Some(dir.clone()),
        every_epoch: cfg.checkpoint_every_epoch,
        resume,
    };
    let result = train_policy(net, env_cfg, &cfg.trainer, &train_set, &set.class.to_string(), &out)?;
    if result.skipped_segments > 0 {
        log::warn!("{} rollout segments were skipped after non-finite updates", result.skipped_segments);
    }
    let path = checkpoint_file(&dir, cfg.trainer.max_epoch - 1);
    log::info!("final checkpoint {}", path.display());
    Ok(path)
}

/// What `evaluate` runs and where it writes.
#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs {
    pub checkpoint: Option<PathBuf>,
    pub static_baseline: bool,
    pub cross: CrossSetting,
    pub episode_logs: bool,
    /// Default `<output_dir>/eval`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    pub runs: usize,
    pub mean_final_cost: f64,
    /// Sampled actions outside `[0, 1]` after clipping.
    pub actions_out_of_range: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankSum {
    pub first: String,
    pub second: String,
    pub z: f64,
    pub p_value: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub dim: usize,
    pub population: usize,
    pub fe_max: u64,
    pub instances: usize,
    pub algorithms: Vec<AlgorithmSummary>,
    pub rank_sum: Option<RankSum>,
}

pub const FINALS_HEADER: &str = "algorithm,instance,seed,final_cost";

fn finals_csv(groups: &[Vec<RunResult>]) -> String {
    let mut out = format!("{FINALS_HEADER}\n");
    for r in groups.iter().flatten() {
        let _ = writeln!(out, "{},{},{},{:?}", r.algorithm, r.instance, r.seed, r.final_cost);
    }
    out
}

/// Runs the held-out evaluation and exports `stats.csv`, `curves.csv`,
/// `actions.csv`, `finals.csv` and `summary.json`.
pub fn evaluate(cfg: &ExperimentConfig, args: &EvaluateArgs) -> Result<EvalSummary, CliError> {
    if args.checkpoint.is_none() && !args.static_baseline {
        return Err(CliError::Config(
            "nothing to evaluate: pass --checkpoint and/or --baseline static".into(),
        ));
    }
    let set = cfg.problem_set()?;
    let (mut instances, env_cfg) = apply_cross_setting(&set, cfg.env_config()?, args.cross)?;
    if let Some(k) = cfg.eval_instances {
        instances.truncate(k);
    }
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("eval"));
    let backbone = env_cfg.backbone;

    let mut groups = Vec::new();
    if let Some(path) = &args.checkpoint {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck = Checkpoint::from_json(&text)?;
        if ck.header.problem_class != set.class.to_string() {
            log::warn!(
                "checkpoint was trained on {} but evaluation uses {}",
                ck.header.problem_class,
                set.class
            );
        }
        let name = format!("gleet_{}", backbone.name());
        groups.push(evaluate_policy(
            &name,
            &ck.network(),
            &instances,
            env_cfg,
            cfg.eval_runs,
            cfg.eval_seed,
            cfg.stochastic_eval,
        )?);
    }
    if args.static_baseline {
        groups.push(run_static_baseline(&instances, env_cfg, cfg.eval_runs, cfg.eval_seed)?);
    }

    export_results(&groups, &out_dir)?;
    write(&out_dir.join("finals.csv"), &finals_csv(&groups))?;
    if args.episode_logs {
        for r in groups.iter().flatten() {
            let name = format!("{}_i{:04}_s{}.csv", r.algorithm, r.instance, r.seed);
            write(&out_dir.join("episodes").join(name), &episode_log_csv(&backbone, &r.episode))?;
        }
    }

    let algorithms = groups
        .iter()
        .map(|g| AlgorithmSummary {
            algorithm: g[0].algorithm.clone(),
            runs: g.len(),
            mean_final_cost: mean_final_cost(g),
            actions_out_of_range: g.iter().map(|r| r.clipped_out_of_range).sum(),
        })
        .collect();
    let rank_sum = match groups.as_slice() {
        [a, b] => {
            let finals = |g: &[RunResult]| g.iter().map(|r| r.final_cost).collect::<Vec<_>>();
            let (z, p_value) = rank_sum_test(&finals(a), &finals(b))?;
            Some(RankSum {
                first: a[0].algorithm.clone(),
                second: b[0].algorithm.clone(),
                z,
                p_value,
            })
        }
        _ => None,
    };
    let summary = EvalSummary {
        dim: instances[0].dim,
        population: env_cfg.population,
        fe_max: env_cfg.fe_max,
        instances: instances.len(),
        algorithms,
        rank_sum,
    };
    let text = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    write(&out_dir.join("summary.json"), &text)?;
    Ok(summary)
}

/// Outcome of re-deriving the rewards of one or more episode logs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub files: usize,
    pub steps: usize,
    /// One line per reward that differs from the stored value.
    pub mismatches: Vec<String>,
}

/// Recomputes rewards from the cost columns of `path` (an episode log or a
/// directory of them) and compares them bit for bit with the stored ones.
pub fn replay(path: &Path, kind: RewardKind) -> Result<ReplayReport, CliError> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        v
    } else if path.exists() {
        vec![path.to_path_buf()]
    } else {
        return Err(CliError::Config(format!("{} does not exist", path.display())));
    };
    if files.is_empty() {
        return Err(CliError::Config(format!("no episode logs under {}", path.display())));
    }
    let mut report = ReplayReport::default();
    for file in files {
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        let records = parse_episode_log(&text).with_context(|| format!("parsing {}", file.display()))?;
        let recomputed = replay_rewards(kind, &records)?;
        for (rec, r) in records[1..].iter().zip(&recomputed) {
            if rec.reward.to_bits() != r.to_bits() {
                report.mismatches.push(format!(
                    "{} generation {}: stored {:?}, recomputed {:?}",
                    file.display(),
                    rec.generation,
                    rec.reward,
                    r
                ));
            }
        }
        report.files += 1;
        report.steps += recomputed.len();
    }
    Ok(report)
}
