//! The control MDP: per-individual state features, action to
//! hyperparameter mapping, one backbone generation per step, and rewards.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{de_step, pso_step, DeConfig, Population, PsoConfig};
use crate::error::{GleetError, Result};
use crate::rng::{rng_for, GleetRng, STREAM_ENV};
use crate::suite::{Bounds, BudgetCounter, ProblemInstance};

/// Features per subject point.
pub const NUM_FEATURES: usize = 9;
/// Smallest normalizer used anywhere in the state or reward.
pub const DENOM_GUARD: f64 = 1e-12;

fn guard(v: f64) -> f64 {
    if v < DENOM_GUARD {
        log::debug!("normalizer {v} replaced by {DENOM_GUARD}");
        DENOM_GUARD
    } else {
        v
    }
}

/// The three feature blocks observed by the policy, stored row-major with
/// `NUM_FEATURES` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBundle {
    pub n: usize,
    /// Features of each current position (`n × 9`).
    pub population: Vec<f64>,
    /// Features of the global best (`1 × 9`).
    pub exploitation: Vec<f64>,
    /// Features of each personal best (`n × 9`).
    pub exploration: Vec<f64>,
}

impl StateBundle {
    pub fn population_row(&self, i: usize) -> &[f64] {
        &self.population[i * NUM_FEATURES..(i + 1) * NUM_FEATURES]
    }

    pub fn exploration_row(&self, i: usize) -> &[f64] {
        &self.exploration[i * NUM_FEATURES..(i + 1) * NUM_FEATURES]
    }

    /// Reorders individuals: row `i` of the result is row `perm[i]` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |src: &[f64]| {
            perm.iter()
                .flat_map(|&p| src[p * NUM_FEATURES..(p + 1) * NUM_FEATURES].iter().copied())
                .collect()
        };
        Self {
            n: self.n,
            population: pick(&self.population),
            exploitation: self.exploitation.clone(),
            exploration: pick(&self.exploration),
        }
    }

    /// Checks shapes, finiteness and the per-feature ranges.
    pub fn validate(&self) -> Result<()> {
        let rows = self.n * NUM_FEATURES;
        if self.population.len() != rows
            || self.exploration.len() != rows
            || self.exploitation.len() != NUM_FEATURES
        {
            return Err(GleetError::Shape(format!(
                "state blocks do not match {} individuals × {NUM_FEATURES} features",
                self.n
            )));
        }
        let blocks = [
            ("population", &self.population),
            ("exploitation", &self.exploitation),
            ("exploration", &self.exploration),
        ];
        for (name, block) in blocks {
            for (r, row) in block.chunks(NUM_FEATURES).enumerate() {
                check_row(row).map_err(|k| {
                    GleetError::NonFinite(format!(
                        "{name} row {r} feature {} = {} out of range",
                        k + 1,
                        row[k]
                    ))
                })?;
            }
        }
        Ok(())
    }
}

/// Index of the first feature violating its range, if any.
fn check_row(row: &[f64]) -> std::result::Result<(), usize> {
    for (k, &v) in row.iter().enumerate() {
        let ok = v.is_finite()
            && match k {
                0..=3 | 6 | 7 => (0.0..=1.0).contains(&v),
                4 | 5 => v >= 0.0,
                _ => (-1.0..=1.0).contains(&v),
            };
        if !ok {
            return Err(k);
        }
    }
    Ok(())
}

/// Progress counters that normalize the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeCounters {
    pub generation: usize,
    pub t_max: usize,
    pub fe: u64,
    pub fe_max: u64,
}

/// Number of generations that fit in the budget after initialization.
pub fn horizon(fe_max: u64, n: usize) -> Result<usize> {
    let n = n as u64;
    if n == 0 || fe_max < 2 * n {
        return Err(GleetError::config(format!(
            "FE_max = {fe_max} leaves no generation for population {n}"
        )));
    }
    Ok(((fe_max - n) / n) as usize)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cosine(subject: &[f64], g: &[f64], p: &[f64]) -> f64 {
    let (mut dot, mut ng, mut np) = (0.0, 0.0, 0.0);
    for ((s, g), p) in subject.iter().zip(g).zip(p) {
        let (u, v) = (g - s, p - s);
        dot += u * v;
        ng += u * u;
        np += v * v;
    }
    if ng == 0.0 || np == 0.0 {
        return 0.0;
    }
    (dot / (ng.sqrt() * np.sqrt())).clamp(-1.0, 1.0)
}

struct Reference<'a> {
    pbest_pos: &'a [f64],
    pbest_cost: f64,
    pbest_cost_initial: f64,
    stagnation_p: usize,
}

fn features(
    out: &mut Vec<f64>,
    subject: &[f64],
    subject_cost: f64,
    reference: Reference<'_>,
    pop: &Population,
    counters: &EpisodeCounters,
    diameter: f64,
) {
    let g0 = guard(pop.gbest_cost_initial);
    let t_max = counters.t_max.max(1) as f64;
    out.extend_from_slice(&[
        pop.gbest_cost / g0,
        counters.fe_max.saturating_sub(counters.fe) as f64 / counters.fe_max.max(1) as f64,
        pop.stagnation_g as f64 / t_max,
        reference.stagnation_p as f64 / t_max,
        (subject_cost - pop.gbest_cost) / g0,
        (subject_cost - reference.pbest_cost) / guard(reference.pbest_cost_initial),
        distance(subject, &pop.gbest_pos) / diameter,
        distance(subject, reference.pbest_pos) / diameter,
        cosine(subject, &pop.gbest_pos, reference.pbest_pos),
    ]);
}

/// Builds the three feature blocks. The exploitation row treats the global
/// best as its own personal best; each exploration row treats `pBest_i` as
/// the subject with `pBest_i` as its reference.
pub fn compute_state(pop: &Population, counters: &EpisodeCounters, bounds: &Bounds) -> StateBundle {
    let n = pop.size();
    let diameter = guard(bounds.diameter(pop.dim()));
    let reference = |i: usize| Reference {
        pbest_pos: &pop.pbest_pos[i],
        pbest_cost: pop.pbest_cost[i],
        pbest_cost_initial: pop.pbest_cost_initial[i],
        stagnation_p: pop.stagnation_p[i],
    };
    let mut population = Vec::with_capacity(n * NUM_FEATURES);
    let mut exploration = Vec::with_capacity(n * NUM_FEATURES);
    for i in 0..n {
        features(&mut population, &pop.positions[i], pop.costs[i], reference(i), pop, counters, diameter);
        features(&mut exploration, &pop.pbest_pos[i], pop.pbest_cost[i], reference(i), pop, counters, diameter);
    }
    let mut exploitation = Vec::with_capacity(NUM_FEATURES);
    let own = Reference {
        pbest_pos: &pop.gbest_pos,
        pbest_cost: pop.gbest_cost,
        pbest_cost_initial: pop.gbest_cost_initial,
        stagnation_p: pop.stagnation_g,
    };
    features(&mut exploitation, &pop.gbest_pos, pop.gbest_cost, own, pop, counters, diameter);
    StateBundle {
        n,
        population,
        exploitation,
        exploration,
    }
}

/// How a PSO action in `[0, 1]` becomes the cognitive coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsoActionMode {
    /// `c1 = 4a`, so the action spans the whole `[0, 4]` range.
    #[default]
    Scaled,
    /// `c1 = a`, the unscaled reading.
    Literal,
}

/// Returns `(c1, c2)` with `c1 + c2 = 4`.
pub fn map_action_pso(a: f64, mode: PsoActionMode) -> (f64, f64) {
    let a = a.clamp(0.0, 1.0);
    let c1 = match mode {
        PsoActionMode::Scaled => 4.0 * a,
        PsoActionMode::Literal => a,
    };
    (c1, 4.0 - c1)
}

/// Returns `(F1, F2, Cr)`.
pub fn map_action_de(a: [f64; 3]) -> (f64, f64, f64) {
    (a[0].clamp(0.0, 1.0), a[1].clamp(0.0, 1.0), a[2].clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    Pso(PsoConfig),
    De(DeConfig),
}

impl Default for Backbone {
    fn default() -> Self {
        Backbone::Pso(PsoConfig::default())
    }
}

impl Backbone {
    /// Hyperparameters controlled per individual.
    pub fn action_dim(&self) -> usize {
        match self {
            Backbone::Pso(_) => 1,
            Backbone::De(_) => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Pso(_) => "pso",
            Backbone::De(_) => "de",
        }
    }

    /// Per-individual actions that reproduce the classic static setting
    /// (`c1 = c2 = 2` for PSO under the scaled mapping; `F1 = F2 = 0.5`,
    /// `Cr = 0.9` for DE).
    pub fn static_action(&self) -> Vec<f64> {
        match self {
            Backbone::Pso(_) => vec![0.5],
            Backbone::De(_) => vec![0.5, 0.5, 0.9],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Backbone::Pso(c) => c.validate(),
            Backbone::De(c) => c.validate(),
        }
    }
}

impl FromStr for Backbone {
    type Err = GleetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pso" => Ok(Backbone::Pso(PsoConfig::default())),
            "de" => Ok(Backbone::De(DeConfig::default())),
            other => Err(GleetError::config(format!(
                "unknown backbone `{other}` (expected pso or de)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Global-best improvement normalized by the initial global best.
    #[default]
    Default,
    /// `+1` on global-best improvement, `−1` otherwise.
    R1,
    /// Relative change of the current-population best.
    R2,
    /// Half the change of squared normalized progress.
    R3,
}

impl FromStr for RewardKind {
    type Err = GleetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(RewardKind::Default),
            "r1" => Ok(RewardKind::R1),
            "r2" => Ok(RewardKind::R2),
            "r3" => Ok(RewardKind::R3),
            other => Err(GleetError::config(format!("unknown reward kind `{other}`"))),
        }
    }
}

pub fn compute_reward(prev_gbest: f64, new_gbest: f64, init_gbest: f64) -> f64 {
    (prev_gbest - new_gbest) / guard(init_gbest)
}

/// Costs observed around one generation, enough to evaluate any reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInputs {
    pub init_gbest: f64,
    pub prev_gbest: f64,
    pub new_gbest: f64,
    /// Best cost in the population before and after the generation.
    pub prev_best: f64,
    pub new_best: f64,
}

/// Stateful reward evaluator; only `R3` carries memory (its progress `p`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTracker {
    pub kind: RewardKind,
    progress: f64,
}

impl RewardTracker {
    pub fn new(kind: RewardKind) -> Self {
        Self { kind, progress: 0.0 }
    }

    pub fn next(&mut self, c: &RewardInputs) -> f64 {
        match self.kind {
            RewardKind::Default => compute_reward(c.prev_gbest, c.new_gbest, c.init_gbest),
            RewardKind::R1 => {
                if c.new_gbest < c.prev_gbest {
                    1.0
                } else {
                    -1.0
                }
            }
            RewardKind::R2 => (c.prev_best - c.new_best) / guard(c.prev_best),
            RewardKind::R3 => {
                let prev = self.progress;
                if c.new_gbest < c.prev_gbest {
                    self.progress = (c.init_gbest - c.new_gbest) / guard(c.init_gbest);
                }
                0.5 * (self.progress * self.progress - prev * prev)
            }
        }
    }
}

/// One line of the episode log. Generation 0 is the initial population and
/// carries no reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub generation: usize,
    pub gbest_cost: f64,
    pub best_cost: f64,
    pub reward: f64,
    /// Mean of the first mapped hyperparameter (`c1` or `F1`).
    pub mean_action: f64,
}

/// Recomputes every reward of a logged episode from its cost columns.
pub fn replay_rewards(kind: RewardKind, records: &[StepRecord]) -> Result<Vec<f64>> {
    let first = records
        .first()
        .ok_or_else(|| GleetError::Parse("empty episode log".into()))?;
    let mut tracker = RewardTracker::new(kind);
    Ok(records
        .windows(2)
        .map(|w| {
            tracker.next(&RewardInputs {
                init_gbest: first.gbest_cost,
                prev_gbest: w[0].gbest_cost,
                new_gbest: w[1].gbest_cost,
                prev_best: w[0].best_cost,
                new_best: w[1].best_cost,
            })
        })
        .collect())
}

pub fn episode_log_header(backbone: &Backbone) -> String {
    let action = match backbone {
        Backbone::Pso(_) => "mean_c1",
        Backbone::De(_) => "mean_f1",
    };
    format!("generation,gbest_cost,best_cost,reward,{action}")
}

/// CSV text of an episode log. Floats use the shortest round-trip
/// representation so replay reproduces stored rewards bit for bit.
pub fn episode_log_csv(backbone: &Backbone, records: &[StepRecord]) -> String {
    let mut out = episode_log_header(backbone);
    out.push('\n');
    for r in records {
        if r.generation == 0 {
            let _ = writeln!(out, "0,{:?},{:?},,", r.gbest_cost, r.best_cost);
        } else {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?}",
                r.generation, r.gbest_cost, r.best_cost, r.reward, r.mean_action
            );
        }
    }
    out
}

pub fn parse_episode_log(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| GleetError::Parse("empty episode log".into()))?;
    if !header.starts_with("generation,gbest_cost,best_cost,reward,") {
        return Err(GleetError::Parse(format!("unexpected header `{header}`")));
    }
    let num = |s: &str, line: usize| -> Result<f64> {
        if s.is_empty() {
            return Ok(0.0);
        }
        s.parse()
            .map_err(|_| GleetError::Parse(format!("line {line}: bad number `{s}`")))
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            let line = k + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(GleetError::Parse(format!("line {line}: expected 5 fields")));
            }
            Ok(StepRecord {
                generation: f[0]
                    .parse()
                    .map_err(|_| GleetError::Parse(format!("line {line}: bad generation")))?,
                gbest_cost: num(f[1], line)?,
                best_cost: num(f[2], line)?,
                reward: num(f[3], line)?,
                mean_action: num(f[4], line)?,
            })
        })
        .collect()
}

/// Everything that defines an episode besides the instance and the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub backbone: Backbone,
    pub population: usize,
    pub fe_max: u64,
    pub reward: RewardKind,
    pub pso_action: PsoActionMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::default(),
            population: 100,
            fe_max: 200_000,
            reward: RewardKind::Default,
            pso_action: PsoActionMode::Scaled,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if matches!(self.backbone, Backbone::De(_)) && self.population < 4 {
            return Err(GleetError::config("DE needs a population of at least 4"));
        }
        horizon(self.fe_max, self.population)?;
        Ok(())
    }

    pub fn horizon(&self) -> Result<usize> {
        horizon(self.fe_max, self.population)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: StateBundle,
    pub reward: f64,
    pub done: bool,
}

/// One optimization episode on one instance.
#[derive(Debug, Clone)]
pub struct GleetEnv {
    cfg: EnvConfig,
    instance: ProblemInstance,
    pop: Population,
    budget: BudgetCounter,
    counters: EpisodeCounters,
    rng: GleetRng,
    rewards: RewardTracker,
    log: Vec<StepRecord>,
}

impl GleetEnv {
    /// Initializes and evaluates a population; the backbone draws from the
    /// environment stream of `seed`.
    pub fn reset(instance: &ProblemInstance, cfg: EnvConfig, seed: u64) -> Result<(Self, StateBundle)> {
        cfg.validate()?;
        let t_max = cfg.horizon()?;
        let mut rng = rng_for(seed, STREAM_ENV);
        let mut budget = BudgetCounter::new(cfg.fe_max);
        let pop = Population::init(instance, cfg.population, &mut rng, &mut budget)?;
        let counters = EpisodeCounters {
            generation: 0,
            t_max,
            fe: budget.used(),
            fe_max: cfg.fe_max,
        };
        let log = vec![StepRecord {
            generation: 0,
            gbest_cost: pop.gbest_cost,
            best_cost: pop.current_best_cost(),
            reward: 0.0,
            mean_action: 0.0,
        }];
        let env = Self {
            cfg,
            instance: instance.clone(),
            pop,
            budget,
            counters,
            rng,
            rewards: RewardTracker::new(cfg.reward),
            log,
        };
        let state = env.state();
        Ok((env, state))
    }

    pub fn state(&self) -> StateBundle {
        compute_state(&self.pop, &self.counters, &self.instance.bounds)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn population(&self) -> &Population {
        &self.pop
    }

    pub fn counters(&self) -> &EpisodeCounters {
        &self.counters
    }

    pub fn instance(&self) -> &ProblemInstance {
        &self.instance
    }

    pub fn is_done(&self) -> bool {
        self.counters.generation >= self.counters.t_max
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    /// Global best cost after each generation (excluding initialization).
    pub fn curve(&self) -> Vec<f64> {
        self.log[1..].iter().map(|r| r.gbest_cost).collect()
    }

    /// Advances one generation. `actions` is `N × M` row-major; entries are
    /// clipped to `[0, 1]` before mapping.
    pub fn step(&mut self, actions: &[f64]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(GleetError::EpisodeDone);
        }
        let n = self.pop.size();
        let m = self.cfg.backbone.action_dim();
        if actions.len() != n * m {
            return Err(GleetError::Shape(format!(
                "{} actions for {n} individuals × {m}",
                actions.len()
            )));
        }
        if let Some(k) = actions.iter().position(|a| !a.is_finite()) {
            return Err(GleetError::NonFinite(format!("action {k}")));
        }
        let prev_gbest = self.pop.gbest_cost;
        let prev_best = self.pop.current_best_cost();
        let first_param: Vec<f64> = match &self.cfg.backbone {
            Backbone::Pso(pcfg) => {
                let (c1, c2): (Vec<f64>, Vec<f64>) = actions
                    .iter()
                    .map(|&a| map_action_pso(a, self.cfg.pso_action))
                    .unzip();
                let w = pcfg.inertia.weight(&self.budget);
                pso_step(&mut self.pop, &c1, &c2, w, pcfg, &mut self.rng, &self.instance, &mut self.budget)?;
                c1
            }
            Backbone::De(dcfg) => {
                let mut f1 = Vec::with_capacity(n);
                let mut f2 = Vec::with_capacity(n);
                let mut cr = Vec::with_capacity(n);
                for a in actions.chunks(3) {
                    let (x, y, z) = map_action_de([a[0], a[1], a[2]]);
                    f1.push(x);
                    f2.push(y);
                    cr.push(z);
                }
                de_step(&mut self.pop, &f1, &f2, &cr, dcfg, &mut self.rng, &self.instance, &mut self.budget)?;
                f1
            }
        };
        self.counters.generation += 1;
        self.counters.fe = self.budget.used();
        let new_best = self.pop.current_best_cost();
        let reward = self.rewards.next(&RewardInputs {
            init_gbest: self.pop.gbest_cost_initial,
            prev_gbest,
            new_gbest: self.pop.gbest_cost,
            prev_best,
            new_best,
        });
        self.log.push(StepRecord {
            generation: self.counters.generation,
            gbest_cost: self.pop.gbest_cost,
            best_cost: new_best,
            reward,
            mean_action: first_param.iter().sum::<f64>() / n as f64,
        });
        Ok(StepOutcome {
            state: self.state(),
            reward,
            done: self.is_done(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Inertia;
    use crate::rng::rng_for;
    use crate::suite::{augment, BaseFunction};

    fn instance(dim: usize) -> ProblemInstance {
        augment(BaseFunction::Rastrigin, dim, Bounds::default(), 0, &mut rng_for(9, 0)).unwrap()
    }

    fn small_cfg() -> EnvConfig {
        EnvConfig {
            population: 10,
            fe_max: 200,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(compute_reward(100.0, 50.0, 100.0), 0.5);
        assert_eq!(compute_reward(50.0, 50.0, 100.0), 0.0);
        assert_eq!(compute_reward(100.0, 0.0, 100.0), 1.0);
        assert_eq!(compute_reward(1.0, 0.0, 0.0), 1e12);
    }

    #[test]
    fn reward_variant_examples() {
        let step = |prev_g, new_g, prev_b, new_b| RewardInputs {
            init_gbest: 100.0,
            prev_gbest: prev_g,
            new_gbest: new_g,
            prev_best: prev_b,
            new_best: new_b,
        };
        let mut r1 = RewardTracker::new(RewardKind::R1);
        assert_eq!(r1.next(&step(10.0, 5.0, 10.0, 5.0)), 1.0);
        assert_eq!(r1.next(&step(5.0, 5.0, 5.0, 6.0)), -1.0);
        let mut r2 = RewardTracker::new(RewardKind::R2);
        assert_eq!(r2.next(&step(10.0, 5.0, 10.0, 5.0)), 0.5);
        assert_eq!(r2.next(&step(5.0, 5.0, 5.0, 10.0)), -1.0);
        let mut r3 = RewardTracker::new(RewardKind::R3);
        assert_eq!(r3.next(&step(100.0, 50.0, 0.0, 0.0)), 0.125);
        assert_eq!(r3.next(&step(50.0, 50.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn pso_action_mapping() {
        assert_eq!(map_action_pso(0.5, PsoActionMode::Scaled), (2.0, 2.0));
        assert_eq!(map_action_pso(0.0, PsoActionMode::Scaled), (0.0, 4.0));
        assert_eq!(map_action_pso(1.0, PsoActionMode::Scaled), (4.0, 0.0));
        assert_eq!(map_action_pso(1.7, PsoActionMode::Scaled), (4.0, 0.0));
        assert_eq!(map_action_pso(0.5, PsoActionMode::Literal), (0.5, 3.5));
        assert_eq!(map_action_de([0.5, 0.3, 0.9]), (0.5, 0.3, 0.9));
    }

    #[test]
    fn horizon_counts_initialization() {
        assert_eq!(horizon(200_000, 100).unwrap(), 1999);
        assert_eq!(horizon(10_000, 50).unwrap(), 199);
        assert!(horizon(150, 100).is_err());
    }

    #[test]
    fn reset_state_values() {
        let (env, s) = GleetEnv::reset(&instance(5), small_cfg(), 1).unwrap();
        assert_eq!(env.counters().fe, 10);
        assert_eq!(env.counters().generation, 0);
        s.validate().unwrap();
        for i in 0..s.n {
            let row = s.population_row(i);
            assert_eq!(row[0], 1.0);
            assert_eq!((row[2], row[3]), (0.0, 0.0));
            assert_eq!(row[1], 0.95);
        }
        assert_eq!(s.exploitation[4], 0.0);
        assert_eq!(s.exploitation[8], 0.0);
    }

    #[test]
    fn cosine_of_orthogonal_directions() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0]), 0.0);
    }

    #[test]
    fn remaining_budget_feature() {
        let inst = instance(2);
        let (env, _) = GleetEnv::reset(&inst, small_cfg(), 1).unwrap();
        let counters = EpisodeCounters {
            fe: 100,
            ..*env.counters()
        };
        let s = compute_state(env.population(), &counters, &inst.bounds);
        assert_eq!(s.population_row(0)[1], 0.5);
    }

    #[test]
    fn episode_runs_to_horizon_and_telescopes() {
        let inst = instance(3);
        let (mut env, _) = GleetEnv::reset(&inst, small_cfg(), 4).unwrap();
        let mut total = 0.0;
        let mut steps = 0;
        loop {
            let out = env.step(&[0.3; 10]).unwrap();
            assert!(out.reward >= 0.0);
            total += out.reward;
            steps += 1;
            if out.done {
                break;
            }
        }
        assert_eq!(steps, 19);
        let pop = env.population();
        let expected = (pop.gbest_cost_initial - pop.gbest_cost) / pop.gbest_cost_initial;
        assert!((total - expected).abs() < 1e-12);
        assert!(matches!(env.step(&[0.3; 10]), Err(GleetError::EpisodeDone)));
    }

    #[test]
    fn midpoint_action_matches_static_step() {
        let inst = instance(4);
        let cfg = small_cfg();
        let (mut env, _) = GleetEnv::reset(&inst, cfg, 2).unwrap();
        env.step(&[0.5; 10]).unwrap();

        let mut rng = rng_for(2, STREAM_ENV);
        let mut budget = BudgetCounter::new(200);
        let mut pop = Population::init(&inst, 10, &mut rng, &mut budget).unwrap();
        let pcfg = PsoConfig::default();
        let w = pcfg.inertia.weight(&budget);
        pso_step(&mut pop, &[2.0; 10], &[2.0; 10], w, &pcfg, &mut rng, &inst, &mut budget).unwrap();
        assert_eq!(env.population(), &pop);
    }

    #[test]
    fn de_episode_and_csv_replay() {
        let inst = instance(3);
        let cfg = EnvConfig {
            backbone: Backbone::De(DeConfig::default()),
            reward: RewardKind::R3,
            ..small_cfg()
        };
        let (mut env, _) = GleetEnv::reset(&inst, cfg, 6).unwrap();
        while !env.is_done() {
            env.step(&[0.5, 0.5, 0.9].repeat(10)).unwrap();
        }
        let csv = episode_log_csv(&cfg.backbone, env.log());
        let parsed = parse_episode_log(&csv).unwrap();
        assert_eq!(parsed, env.log());
        let replayed = replay_rewards(RewardKind::R3, &parsed).unwrap();
        let stored: Vec<f64> = parsed[1..].iter().map(|r| r.reward).collect();
        assert_eq!(replayed, stored);
    }

    #[test]
    fn bad_actions_rejected() {
        let (mut env, _) = GleetEnv::reset(&instance(2), small_cfg(), 1).unwrap();
        assert!(env.step(&[0.5; 3]).is_err());
        assert!(env.step(&[f64::NAN; 10]).is_err());
        assert_eq!(env.counters().generation, 0);
    }

    #[test]
    fn constant_inertia_override() {
        let cfg = EnvConfig {
            backbone: Backbone::Pso(PsoConfig {
                inertia: Inertia::Constant(0.7),
                ..PsoConfig::default()
            }),
            ..small_cfg()
        };
        let (mut env, _) = GleetEnv::reset(&instance(2), cfg, 1).unwrap();
        env.step(&[0.5; 10]).unwrap();
    }

    #[test]
    fn permuted_state_reorders_rows() {
        let (_, s) = GleetEnv::reset(&instance(2), small_cfg(), 1).unwrap();
        let perm: Vec<usize> = (0..10).rev().collect();
        let p = s.permuted(&perm);
        assert_eq!(p.population_row(0), s.population_row(9));
        assert_eq!(p.exploration_row(3), s.exploration_row(6));
    }
}
