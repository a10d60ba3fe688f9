//! Experiment configuration: one JSON file plus `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use gleet::backbone::{DeConfig, PsoConfig};
use gleet::env::{Backbone, EnvConfig, PsoActionMode, RewardKind};
use gleet::policy::NetworkConfig;
use gleet::ppo::TrainerConfig;
use gleet::suite::{generate_split, Bounds, ProblemClass, ProblemSet};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Every setting of an experiment. Missing fields take their defaults, so a
/// config file only needs the values that differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// A base function name (`rastrigin`, `ackley`, ...) or `f_mix`.
    pub problem_class: ProblemClass,
    pub dim: usize,
    pub population: usize,
    pub fe_max: u64,
    /// `pso` or `de`; the matching field below supplies its settings.
    pub backbone: String,
    pub pso: PsoConfig,
    pub de: DeConfig,
    pub pso_action: PsoActionMode,
    pub reward: RewardKind,
    /// Ablations live here as `use_eet_embeddings` and `use_mha`. The
    /// per-individual action width always follows the backbone.
    pub network: NetworkConfig,
    /// Also carries the training seed.
    pub trainer: TrainerConfig,
    pub bounds: Bounds,
    pub n_train: usize,
    pub n_test: usize,
    pub suite_seed: u64,
    /// Load the problem set from this file instead of regenerating it.
    pub suite_file: Option<PathBuf>,
    pub eval_runs: usize,
    pub eval_seed: u64,
    /// Evaluate only the first `k` test instances.
    pub eval_instances: Option<usize>,
    pub stochastic_eval: bool,
    pub checkpoint_every_epoch: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            problem_class: ProblemClass::Mix,
            dim: 10,
            population: env.population,
            fe_max: env.fe_max,
            backbone: "pso".into(),
            pso: PsoConfig::default(),
            de: DeConfig::default(),
            pso_action: env.pso_action,
            reward: env.reward,
            network: NetworkConfig::default(),
            trainer: TrainerConfig::default(),
            bounds: Bounds::default(),
            n_train: 128,
            n_test: 1024,
            suite_seed: 0,
            suite_file: None,
            eval_runs: 10,
            eval_seed: 0,
            eval_instances: None,
            stochastic_eval: true,
            checkpoint_every_epoch: false,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults) and applies each `key=value`
    /// override in order, then validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let parsed: ExperimentConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                to_tree(&parsed)?
            }
            None => to_tree(&ExperimentConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(tree).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn backbone(&self) -> Result<Backbone, CliError> {
        match self.backbone.as_str() {
            "pso" => Ok(Backbone::Pso(self.pso)),
            "de" => Ok(Backbone::De(self.de)),
            other => Err(CliError::Config(format!(
                "unknown backbone `{other}` (expected pso or de)"
            ))),
        }
    }

    pub fn env_config(&self) -> Result<EnvConfig, CliError> {
        Ok(EnvConfig {
            backbone: self.backbone()?,
            population: self.population,
            fe_max: self.fe_max,
            reward: self.reward,
            pso_action: self.pso_action,
        })
    }

    pub fn network_config(&self) -> Result<NetworkConfig, CliError> {
        Ok(NetworkConfig {
            action_dim: self.backbone()?.action_dim(),
            ..self.network
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.env_config()?.validate()?;
        self.network_config()?.validate()?;
        self.trainer.validate()?;
        self.bounds.validate()?;
        if self.dim == 0 {
            return Err(CliError::Config("dim must be at least 1".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(CliError::Config("n_train and n_test must be positive".into()));
        }
        if self.eval_runs == 0 {
            return Err(CliError::Config("eval_runs must be positive".into()));
        }
        if self.eval_instances == Some(0) {
            return Err(CliError::Config("eval_instances must be positive".into()));
        }
        if let Some(p) = &self.suite_file {
            if !p.exists() {
                return Err(CliError::Config(format!("suite file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// The configured problem set, loaded from `suite_file` or regenerated.
    pub fn problem_set(&self) -> Result<ProblemSet, CliError> {
        match &self.suite_file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let set = ProblemSet::from_json(&text)?;
                if set.dim != self.dim {
                    return Err(CliError::Config(format!(
                        "suite file has dimension {} but the config says {}",
                        set.dim, self.dim
                    )));
                }
                Ok(set)
            }
            None => Ok(generate_split(
                self.problem_class,
                self.n_train,
                self.n_test,
                self.dim,
                self.bounds,
                self.suite_seed,
            )?),
        }
    }
}

fn to_tree(cfg: &ExperimentConfig) -> Result<Value, CliError> {
    serde_json::to_value(cfg).map_err(|e| CliError::Config(e.to_string()))
}

/// Sets the dotted `key` of `tree` to `value`. The key must already exist so
/// that typos fail loudly. Values are read as JSON when they parse and as
/// plain strings otherwise, so `backbone=de` and `dim=5` both work.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let mut node = &mut *tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
