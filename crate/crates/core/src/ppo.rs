//! T-step PPO: rollout segments over a batch of environments, GAE
//! advantages, clipped-surrogate updates with Adam, and the epoch loop with
//! checkpoints and a CSV training log.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gleet_autodiff::{ParamGrads, ParameterSet, Tape, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, GleetEnv, StateBundle};
use crate::error::{GleetError, Result};
use crate::policy::{clip_actions, log_prob_and_entropy, Checkpoint, CheckpointHeader, PolicyNetwork};
use crate::rng::{derive_seed, rng_for, GleetRng, STREAM_POLICY};
use crate::suite::ProblemInstance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Environment steps per segment.
    pub rollout_steps: usize,
    /// Full-batch passes over each segment.
    pub update_epochs: usize,
    /// Instances sampled per training epoch.
    pub batch_size: usize,
    pub max_epoch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            rollout_steps: 10,
            update_epochs: 3,
            batch_size: 16,
            max_epoch: 100,
            lr_start: 4e-5,
            lr_end: 1e-5,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.rollout_steps >= 1, "rollout_steps must be at least 1"),
            (self.update_epochs >= 1, "update_epochs must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.max_epoch >= 1, "max_epoch must be at least 1"),
            (self.gamma > 0.0 && self.gamma <= 1.0, "gamma must lie in (0, 1]"),
            ((0.0..=1.0).contains(&self.gae_lambda), "gae_lambda must lie in [0, 1]"),
            (self.clip_eps > 0.0 && self.clip_eps < 1.0, "clip_eps must lie in (0, 1)"),
            (self.lr_start >= 0.0 && self.lr_end >= 0.0, "learning rates must be non-negative"),
            (self.value_coef >= 0.0 && self.entropy_coef >= 0.0, "loss coefficients must be non-negative"),
            (self.max_grad_norm > 0.0, "max_grad_norm must be positive"),
            (
                (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
                "Adam betas must lie in [0, 1)",
            ),
            (self.adam_eps > 0.0, "adam_eps must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(GleetError::config(msg));
            }
        }
        Ok(())
    }
}

/// Linear decay from `lr_start` at epoch 0 to `lr_end` at the final epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainerConfig) -> f64 {
    if cfg.max_epoch <= 1 {
        return cfg.lr_start;
    }
    let frac = epoch.min(cfg.max_epoch - 1) as f64 / (cfg.max_epoch - 1) as f64;
    cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac
}

/// First and second moment estimates, stored as parameter sets so they
/// serialize exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub first: ParameterSet,
    pub second: ParameterSet,
}

impl Adam {
    pub fn new(params: &ParameterSet) -> Result<Self> {
        let mut first = ParameterSet::new();
        let mut second = ParameterSet::new();
        for (_, name, t) in params.iter() {
            first.insert(name, Tensor::zeros(t.shape().to_vec()))?;
            second.insert(name, Tensor::zeros(t.shape().to_vec()))?;
        }
        Ok(Self {
            step: 0,
            first,
            second,
        })
    }

    pub fn apply(&mut self, params: &mut ParameterSet, grads: &ParamGrads, lr: f64, cfg: &TrainerConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let m = self.first.tensor_mut(id).data_mut();
            for (m, g) in m.iter_mut().zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
            }
            let v = self.second.tensor_mut(id).data_mut();
            for (v, g) in v.iter_mut().zip(g) {
                *v = b2 * *v + (1.0 - b2) * g * g;
            }
            let m = self.first.tensor(id).data();
            let v = self.second.tensor(id).data();
            let p = params.tensor_mut(id).data_mut();
            for ((p, m), v) in p.iter_mut().zip(m).zip(v) {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateBundle,
    /// Pre-clip sampled actions, `N × M`.
    pub actions: Vec<f64>,
    pub old_log_prob: f64,
    pub reward: f64,
    pub value: f64,
}

/// Steps collected from one environment within a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSegment {
    pub transitions: Vec<Transition>,
    /// Value of the state after the last step, or 0 if the episode ended.
    pub bootstrap: f64,
}

/// An environment paired with its action-sampling stream.
#[derive(Debug, Clone)]
pub struct Worker {
    pub env: GleetEnv,
    pub state: StateBundle,
    pub rng: GleetRng,
    pub episode_return: f64,
}

impl Worker {
    pub fn new(instance: &ProblemInstance, cfg: EnvConfig, seed: u64) -> Result<Self> {
        let (env, state) = GleetEnv::reset(instance, cfg, seed)?;
        Ok(Self {
            env,
            state,
            rng: rng_for(seed, STREAM_POLICY),
            episode_return: 0.0,
        })
    }

    fn advance(&mut self, net: &PolicyNetwork, steps: usize) -> Result<EnvSegment> {
        let mut transitions = Vec::with_capacity(steps);
        for _ in 0..steps {
            if self.env.is_done() {
                break;
            }
            let out = net.act(&self.state)?;
            let actions = out.sample(&mut self.rng);
            let (log_prob, _) = log_prob_and_entropy(&out.mu, &out.sigma, &actions)?;
            let step = self.env.step(&clip_actions(&actions))?;
            self.episode_return += step.reward;
            let state = std::mem::replace(&mut self.state, step.state);
            transitions.push(Transition {
                state,
                actions,
                old_log_prob: log_prob,
                reward: step.reward,
                value: out.value,
            });
        }
        let bootstrap = if self.env.is_done() {
            0.0
        } else {
            net.act(&self.state)?.value
        };
        Ok(EnvSegment {
            transitions,
            bootstrap,
        })
    }
}

/// Runs up to `steps` steps in every unfinished environment. Workers are
/// independent, so the result does not depend on how many threads run them.
pub fn collect_segment(workers: &mut [Worker], net: &PolicyNetwork, steps: usize) -> Result<Vec<EnvSegment>> {
    workers
        .par_iter_mut()
        .map(|w| w.advance(net, steps))
        .collect()
}

/// GAE advantages and returns for one environment's segment, before
/// standardization.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Rescales to zero mean and unit standard deviation (guarded).
pub fn standardize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// A transition with its learning targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub transition: Transition,
    pub advantage: f64,
    pub ret: f64,
}

/// Flattens a segment into samples with per-segment standardized
/// advantages.
pub fn compute_returns_advantages(segments: Vec<EnvSegment>, cfg: &TrainerConfig) -> Vec<Sample> {
    let mut samples = Vec::new();
    for seg in segments {
        let rewards: Vec<f64> = seg.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = seg.transitions.iter().map(|t| t.value).collect();
        let (adv, ret) = gae(&rewards, &values, seg.bootstrap, cfg.gamma, cfg.gae_lambda);
        for ((t, a), r) in seg.transitions.into_iter().zip(adv).zip(ret) {
            samples.push(Sample {
                transition: t,
                advantage: a,
                ret: r,
            });
        }
    }
    let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    standardize(&mut adv);
    for (s, a) in samples.iter_mut().zip(adv) {
        s.advantage = a;
    }
    samples
}

/// Loss terms of one sample and its gradient with respect to the
/// parameters, each already divided by `batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    pub ratio: f64,
    /// `policy_loss + value_coef·value_loss − entropy_coef·entropy`.
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Computes the PPO loss of one sample. The gradients of the loss with
/// respect to μ, σ and the value are formed in closed form and pushed
/// through the network by a vector-Jacobian product.
pub fn sample_loss_and_grad(
    net_cfg: &crate::policy::NetworkConfig,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &TrainerConfig,
    batch: usize,
) -> Result<(SampleLoss, ParamGrads)> {
    let mut grads = ParamGrads::zeros_like(params);
    let loss = accumulate_sample_grad(net_cfg, params, sample, cfg, batch, &mut grads)?;
    Ok((loss, grads))
}

/// As [`sample_loss_and_grad`], adding the gradient into `out`.
pub fn accumulate_sample_grad(
    net_cfg: &crate::policy::NetworkConfig,
    params: &ParameterSet,
    sample: &Sample,
    cfg: &TrainerConfig,
    batch: usize,
    out: &mut ParamGrads,
) -> Result<SampleLoss> {
    let mut tape = Tape::with_params(params);
    let nodes = net_cfg.forward(&mut tape, &sample.transition.state)?;
    let mu = tape.value(nodes.mu).to_vec();
    let sigma = tape.value(nodes.sigma).to_vec();
    let value = tape.value(nodes.value)[0];
    let actions = &sample.transition.actions;
    let (log_prob, entropy) = log_prob_and_entropy(&mu, &sigma, actions)?;
    let ratio = (log_prob - sample.transition.old_log_prob).exp();
    let adv = sample.advantage;
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
    let policy_loss = -unclipped.min(clipped);
    let value_err = value - sample.ret;
    let value_loss = value_err * value_err;
    let total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy;
    if !total.is_finite() {
        return Err(GleetError::NonFinite(format!(
            "PPO loss (ratio {ratio}, value {value})"
        )));
    }

    let scale = 1.0 / batch as f64;
    // The surrogate only carries gradient through the branch min() selects.
    let d_logp = if unclipped <= clipped { -adv * ratio } else { 0.0 };
    let mut d_mu = Vec::with_capacity(mu.len());
    let mut d_sigma = Vec::with_capacity(mu.len());
    for ((&m, &s), &a) in mu.iter().zip(&sigma).zip(actions) {
        let diff = a - m;
        let s2 = s * s;
        d_mu.push(scale * d_logp * diff / s2);
        let dlogp_ds = -1.0 / s + diff * diff / (s2 * s);
        d_sigma.push(scale * (d_logp * dlogp_ds - cfg.entropy_coef / s));
    }
    let d_value = [scale * 2.0 * cfg.value_coef * value_err];
    tape.backward_accumulate(
        &[
            (nodes.mu, d_mu.as_slice()),
            (nodes.sigma, d_sigma.as_slice()),
            (nodes.value, d_value.as_slice()),
        ],
        out,
    )?;
    Ok(SampleLoss {
        ratio,
        total,
        policy_loss,
        value_loss,
        entropy,
    })
}

/// Mean losses of one update, averaged over passes and samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Ratios seen in the first pass, which must all be 1.
    pub max_first_pass_ratio_error: f64,
    pub grad_norm: f64,
}

/// Samples per gradient chunk; the reduction order is fixed by this, not
/// by the thread count.
const CHUNK: usize = 8;

/// Mean loss gradient over `samples` with the per-sample terms.
pub fn batch_gradient(
    net: &PolicyNetwork,
    samples: &[Sample],
    cfg: &TrainerConfig,
) -> Result<(ParamGrads, Vec<SampleLoss>)> {
    let batch = samples.len();
    let partial: Vec<(ParamGrads, Vec<SampleLoss>)> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ParamGrads::zeros_like(&net.params);
            let mut losses = Vec::with_capacity(chunk.len());
            for s in chunk {
                losses.push(accumulate_sample_grad(&net.config, &net.params, s, cfg, batch, &mut acc)?);
            }
            Ok((acc, losses))
        })
        .collect::<Result<_>>()?;
    let mut total = ParamGrads::zeros_like(&net.params);
    let mut losses = Vec::with_capacity(batch);
    for (g, l) in partial {
        total.add_assign(&g);
        losses.extend(l);
    }
    Ok((total, losses))
}

/// `update_epochs` full-batch passes over the segment. A non-finite loss or
/// gradient aborts the remaining passes and discards the segment.
pub fn ppo_update(
    net: &mut PolicyNetwork,
    adam: &mut Adam,
    samples: &[Sample],
    lr: f64,
    cfg: &TrainerConfig,
) -> Result<UpdateReport> {
    let mut report = UpdateReport::default();
    if samples.is_empty() {
        return Ok(report);
    }
    let passes = cfg.update_epochs as f64;
    for pass in 0..cfg.update_epochs {
        let (mut grads, losses) = batch_gradient(net, samples, cfg)?;
        if !grads.all_finite() {
            return Err(GleetError::NonFinite("PPO gradient".into()));
        }
        let n = losses.len() as f64;
        for l in &losses {
            report.policy_loss += l.policy_loss / n / passes;
            report.value_loss += l.value_loss / n / passes;
            report.entropy += l.entropy / n / passes;
            if pass == 0 {
                report.max_first_pass_ratio_error = report.max_first_pass_ratio_error.max((l.ratio - 1.0).abs());
            }
        }
        report.grad_norm = grads.clip_global_norm(cfg.max_grad_norm);
        if lr != 0.0 {
            adam.apply(&mut net.params, &grads, lr, cfg);
        }
    }
    Ok(report)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,mean_return,policy_loss,value_loss,entropy";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?}",
            self.epoch, self.lr, self.mean_return, self.policy_loss, self.value_loss, self.entropy
        )
    }
}

/// Where and how often training writes its artifacts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    /// Write a checkpoint after every epoch, not just the last.
    pub every_epoch: bool,
    /// Continue from `dir/resume.json` when present.
    pub resume: bool,
}

/// State needed to continue training after an interruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub next_epoch: usize,
    pub checkpoint: Checkpoint,
    pub adam: Adam,
}

/// Everything a training run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub network: PolicyNetwork,
    pub log: Vec<EpochLog>,
    pub skipped_segments: usize,
}

pub fn checkpoint_file(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:03}.json"))
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for row in log {
        let _ = writeln!(out, "{}", row.csv_row());
    }
    out
}

fn parse_train_log(text: &str) -> Result<Vec<EpochLog>> {
    let bad = |l: &str| GleetError::Parse(format!("bad training log row `{l}`"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad(l))?,
                lr: num(f[1])?,
                mean_return: num(f[2])?,
                policy_loss: num(f[3])?,
                value_loss: num(f[4])?,
                entropy: num(f[5])?,
            })
        })
        .collect()
}

/// Trains a fresh (or resumed) network on `train` instances.
///
/// Each epoch draws its instance batch and environment seeds from
/// `derive_seed(cfg.seed, epoch)`, so an epoch depends only on the
/// parameters and optimizer state it starts from.
pub fn train(
    net_init: PolicyNetwork,
    env_cfg: EnvConfig,
    cfg: &TrainerConfig,
    train: &[ProblemInstance],
    problem_class: &str,
    out: &TrainOutput,
) -> Result<TrainResult> {
    cfg.validate()?;
    env_cfg.validate()?;
    net_init.config.validate()?;
    if train.is_empty() {
        return Err(GleetError::config("training split is empty"));
    }
    if net_init.config.action_dim != env_cfg.backbone.action_dim() {
        return Err(GleetError::config(format!(
            "network emits {} values per individual but {} needs {}",
            net_init.config.action_dim,
            env_cfg.backbone.name(),
            env_cfg.backbone.action_dim()
        )));
    }

    let mut net = net_init;
    let mut adam = Adam::new(&net.params)?;
    let mut log = Vec::new();
    let mut start = 0;
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let resume_path = dir.join("resume.json");
        if out.resume && resume_path.exists() {
            let state: ResumeState = serde_json::from_str(&fs::read_to_string(&resume_path)?)?;
            if state.checkpoint.header.network != net.config {
                return Err(GleetError::config("resume state has a different network configuration"));
            }
            net.params = state.checkpoint.params;
            adam = state.adam;
            start = state.next_epoch;
            let prev = fs::read_to_string(dir.join("train_log.csv")).unwrap_or_default();
            log = parse_train_log(&prev)?;
            log.retain(|r| r.epoch < start);
            log::info!("resuming at epoch {start}");
        }
    }
    let mut timing = String::from("epoch,wall_time_s\n");
    let mut skipped = 0;

    for epoch in start..cfg.max_epoch {
        let started = Instant::now();
        let lr = lr_schedule(epoch, cfg);
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let mut rng = rng_for(epoch_seed, 0);
        let picks: Vec<usize> = if cfg.batch_size <= train.len() {
            sample(&mut rng, train.len(), cfg.batch_size).into_vec()
        } else {
            (0..cfg.batch_size).map(|_| rng.random_range(0..train.len())).collect()
        };
        let mut workers = picks
            .iter()
            .enumerate()
            .map(|(k, &i)| Worker::new(&train[i], env_cfg, derive_seed(epoch_seed, k as u64 + 1)))
            .collect::<Result<Vec<_>>>()?;

        let mut totals = UpdateReport::default();
        let mut updates = 0usize;
        while workers.iter().any(|w| !w.env.is_done()) {
            let segments = collect_segment(&mut workers, &net, cfg.rollout_steps)?;
            let samples = compute_returns_advantages(segments, cfg);
            let backup = (net.params.clone(), adam.clone());
            match ppo_update(&mut net, &mut adam, &samples, lr, cfg) {
                Ok(r) => {
                    totals.policy_loss += r.policy_loss;
                    totals.value_loss += r.value_loss;
                    totals.entropy += r.entropy;
                    updates += 1;
                }
                Err(GleetError::NonFinite(what)) => {
                    log::warn!("epoch {epoch}: discarding segment after non-finite {what}");
                    (net.params, adam) = backup;
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let k = updates.max(1) as f64;
        let row = EpochLog {
            epoch,
            lr,
            mean_return: workers.iter().map(|w| w.episode_return).sum::<f64>() / workers.len() as f64,
            policy_loss: totals.policy_loss / k,
            value_loss: totals.value_loss / k,
            entropy: totals.entropy / k,
        };
        log::info!(
            "epoch {epoch}: return {:.4} policy {:.4} value {:.4}",
            row.mean_return,
            row.policy_loss,
            row.value_loss
        );
        log.push(row);
        let _ = writeln!(timing, "{epoch},{:.3}", started.elapsed().as_secs_f64());

        if let Some(dir) = &out.dir {
            let checkpoint = Checkpoint {
                header: CheckpointHeader {
                    network: net.config,
                    seed: cfg.seed,
                    problem_class: problem_class.to_string(),
                    epoch,
                },
                params: net.params.clone(),
            };
            if out.every_epoch || epoch + 1 == cfg.max_epoch {
                fs::write(checkpoint_file(dir, epoch), checkpoint.to_json()?)?;
            }
            fs::write(dir.join("train_log.csv"), train_log_csv(&log))?;
            let resume = ResumeState {
                next_epoch: epoch + 1,
                checkpoint,
                adam: adam.clone(),
            };
            fs::write(dir.join("resume.json"), serde_json::to_string(&resume)?)?;
        }
    }
    if let Some(dir) = &out.dir {
        fs::write(dir.join("timing.csv"), timing)?;
    }
    Ok(TrainResult {
        network: net,
        log,
        skipped_segments: skipped,
    })
}
