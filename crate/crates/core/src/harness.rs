//! Evaluation protocol: seeded multi-run episodes for learned and static
//! controllers, per-instance statistics with average ranks, rank-sum tests,
//! cross-setting evaluation and CSV export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::env::{map_action_de, map_action_pso, Backbone, EnvConfig, GleetEnv, StepRecord};
use crate::error::{GleetError, Result};
use crate::policy::{clip_actions, PolicyNetwork};
use crate::rng::{rng_for, STREAM_POLICY};
use crate::suite::{generate_split, ProblemInstance, ProblemSet};

/// What chooses the per-individual hyperparameters during an episode.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    /// Sample from the network (or take its mean when `stochastic` is off).
    Policy {
        net: &'a PolicyNetwork,
        stochastic: bool,
    },
    /// The same action row for every individual at every generation.
    Static(&'a [f64]),
}

/// One seeded episode on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub algorithm: String,
    pub instance: usize,
    pub seed: u64,
    pub final_cost: f64,
    /// Global best cost after each generation.
    pub curve: Vec<f64>,
    /// Mean and standard deviation over individuals of the first mapped
    /// hyperparameter (`c1` or `F1`) at each generation.
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    /// Sampled actions that fell outside `[0, 1]` after clipping (always 0).
    pub clipped_out_of_range: usize,
    /// Per-generation log including rewards, for replay checks.
    pub episode: Vec<StepRecord>,
    /// Wall time in seconds; not part of any export.
    pub wall_time: f64,
}

fn first_hyperparameters(backbone: &Backbone, cfg: &EnvConfig, actions: &[f64]) -> Vec<f64> {
    match backbone {
        Backbone::Pso(_) => actions.iter().map(|&a| map_action_pso(a, cfg.pso_action).0).collect(),
        Backbone::De(_) => actions
            .chunks(3)
            .map(|a| map_action_de([a[0], a[1], a[2]]).0)
            .collect(),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs one full episode. The backbone uses the environment stream of
/// `seed`; action sampling uses its policy stream.
pub fn run_episode(
    algorithm: &str,
    instance: &ProblemInstance,
    cfg: EnvConfig,
    controller: Controller<'_>,
    seed: u64,
) -> Result<RunResult> {
    let started = Instant::now();
    let (mut env, mut state) = GleetEnv::reset(instance, cfg, seed)?;
    let mut rng = rng_for(seed, STREAM_POLICY);
    let n = cfg.population;
    let static_row: Option<Vec<f64>> = match controller {
        Controller::Static(row) => {
            if row.len() != cfg.backbone.action_dim() {
                return Err(GleetError::config(format!(
                    "static action has {} values, backbone needs {}",
                    row.len(),
                    cfg.backbone.action_dim()
                )));
            }
            Some(row.repeat(n))
        }
        Controller::Policy { .. } => None,
    };
    let (mut action_mean, mut action_std) = (Vec::new(), Vec::new());
    let mut out_of_range = 0;
    while !env.is_done() {
        let actions = match (&controller, &static_row) {
            (_, Some(row)) => row.clone(),
            (Controller::Policy { net, stochastic }, None) => {
                let out = net.act(&state)?;
                let raw = if *stochastic { out.sample(&mut rng) } else { out.mu };
                clip_actions(&raw)
            }
            (Controller::Static(_), None) => unreachable!("static rows are prepared above"),
        };
        out_of_range += actions.iter().filter(|a| !(0.0..=1.0).contains(*a)).count();
        let (m, s) = mean_std(&first_hyperparameters(&cfg.backbone, &cfg, &actions));
        action_mean.push(m);
        action_std.push(s);
        state = env.step(&actions)?.state;
        state.validate()?;
    }
    let curve = env.curve();
    Ok(RunResult {
        algorithm: algorithm.to_string(),
        instance: instance.id,
        seed,
        final_cost: *curve.last().unwrap_or(&env.population().gbest_cost),
        curve,
        action_mean,
        action_std,
        clipped_out_of_range: out_of_range,
        episode: env.log().to_vec(),
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Every instance × `runs` seeds (`base_seed + run_index`), in
/// instance-major order regardless of parallelism.
pub fn evaluate(
    algorithm: &str,
    controller: Controller<'_>,
    instances: &[ProblemInstance],
    cfg: EnvConfig,
    runs: usize,
    base_seed: u64,
) -> Result<Vec<RunResult>> {
    let grid: Vec<(usize, u64)> = (0..instances.len())
        .flat_map(|i| (0..runs as u64).map(move |r| (i, base_seed + r)))
        .collect();
    grid.par_iter()
        .map(|&(i, seed)| run_episode(algorithm, &instances[i], cfg, controller, seed))
        .collect()
}

pub fn evaluate_policy(
    algorithm: &str,
    net: &PolicyNetwork,
    instances: &[ProblemInstance],
    cfg: EnvConfig,
    runs: usize,
    base_seed: u64,
    stochastic: bool,
) -> Result<Vec<RunResult>> {
    if net.config.action_dim != cfg.backbone.action_dim() {
        return Err(GleetError::config(format!(
            "checkpoint emits {} values per individual but {} needs {}",
            net.config.action_dim,
            cfg.backbone.name(),
            cfg.backbone.action_dim()
        )));
    }
    evaluate(algorithm, Controller::Policy { net, stochastic }, instances, cfg, runs, base_seed)
}

/// The backbone with its classic fixed hyperparameters.
pub fn run_static_baseline(
    instances: &[ProblemInstance],
    cfg: EnvConfig,
    runs: usize,
    base_seed: u64,
) -> Result<Vec<RunResult>> {
    let row = cfg.backbone.static_action();
    let name = format!("{}_static", cfg.backbone.name());
    evaluate(&name, Controller::Static(&row), instances, cfg, runs, base_seed)
}

/// Settings that may differ from training at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CrossSetting {
    pub dim: Option<usize>,
    pub population: Option<usize>,
    pub fe_max: Option<u64>,
}

/// Instances and environment configuration after applying `over`. A new
/// dimension regenerates the set with the same class, sizes and seed.
pub fn apply_cross_setting(set: &ProblemSet, cfg: EnvConfig, over: CrossSetting) -> Result<(Vec<ProblemInstance>, EnvConfig)> {
    let instances = match over.dim {
        Some(d) if d != set.dim => {
            let regenerated = generate_split(set.class, set.train.len(), set.test.len(), d, set.bounds, set.seed)?;
            regenerated.test_instances().cloned().collect()
        }
        _ => set.test_instances().cloned().collect(),
    };
    let cfg = EnvConfig {
        population: over.population.unwrap_or(cfg.population),
        fe_max: over.fe_max.unwrap_or(cfg.fe_max),
        ..cfg
    };
    cfg.validate()?;
    Ok((instances, cfg))
}

/// Drives a trained network on a setting it was not trained on.
pub fn cross_setting_eval(
    algorithm: &str,
    net: &PolicyNetwork,
    set: &ProblemSet,
    cfg: EnvConfig,
    over: CrossSetting,
    runs: usize,
    base_seed: u64,
) -> Result<Vec<RunResult>> {
    let (instances, cfg) = apply_cross_setting(set, cfg, over)?;
    evaluate_policy(algorithm, net, &instances, cfg, runs, base_seed, true)
}

/// Ranks with ties sharing the average of their positions; rank 1 is the
/// smallest value.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub algorithm: String,
    pub instance: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
    /// Rank among algorithms on this instance.
    pub rank: f64,
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Final costs of each instance, keyed by instance then seed.
fn grid_of(results: &[RunResult]) -> BTreeMap<usize, BTreeMap<u64, f64>> {
    let mut grid: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in results {
        grid.entry(r.instance).or_default().insert(r.seed, r.final_cost);
    }
    grid
}

/// Per-instance mean, std and rank of each algorithm's final costs. Every
/// algorithm must cover the same (instance, seed) grid.
pub fn rank_table(groups: &[Vec<RunResult>]) -> Result<Vec<StatsRow>> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(GleetError::GridMismatch("empty result group".into()));
    }
    let grids: Vec<_> = groups.iter().map(|g| grid_of(g)).collect();
    let keys = |g: &BTreeMap<usize, BTreeMap<u64, f64>>| -> Vec<(usize, Vec<u64>)> {
        g.iter().map(|(i, s)| (*i, s.keys().copied().collect())).collect()
    };
    let reference = keys(&grids[0]);
    for (k, g) in grids.iter().enumerate().skip(1) {
        if keys(g) != reference {
            return Err(GleetError::GridMismatch(format!(
                "{} and {} were run on different instance/seed grids",
                groups[0][0].algorithm, groups[k][0].algorithm
            )));
        }
    }
    let mut rows = Vec::new();
    for (instance, _) in &reference {
        let stats: Vec<(f64, f64)> = grids
            .iter()
            .map(|g| {
                let costs: Vec<f64> = g[instance].values().copied().collect();
                (costs.iter().sum::<f64>() / costs.len() as f64, sample_std(&costs))
            })
            .collect();
        let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
        let ranks = average_ranks(&means);
        for (k, ((mean, std), rank)) in stats.into_iter().zip(ranks).enumerate() {
            rows.push(StatsRow {
                algorithm: groups[k][0].algorithm.clone(),
                instance: *instance,
                mean,
                std,
                rank,
            });
        }
    }
    Ok(rows)
}

/// Mean final cost over all runs.
pub fn mean_final_cost(results: &[RunResult]) -> f64 {
    results.iter().map(|r| r.final_cost).sum::<f64>() / results.len().max(1) as f64
}

/// Percentage difference `(f′ − f)/f` of a transferred policy's mean cost
/// against the native policy's; negative means the transfer did better.
pub fn generalization_gap(transferred: &[RunResult], native: &[RunResult]) -> Result<f64> {
    rank_table(&[transferred.to_vec(), native.to_vec()])?;
    gap_percent(mean_final_cost(transferred), mean_final_cost(native))
}

pub fn gap_percent(transferred_mean: f64, native_mean: f64) -> Result<f64> {
    if !(native_mean > 0.0) {
        return Err(GleetError::config(format!(
            "gap needs a positive reference mean, got {native_mean}"
        )));
    }
    Ok(100.0 * (transferred_mean - native_mean) / native_mean)
}

/// Two-sided Wilcoxon rank-sum test under the normal approximation with
/// tie correction. Returns `(z, p)`; `z < 0` means `a` tends to be smaller.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(GleetError::config("rank-sum test needs two non-empty samples"));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let r1: f64 = ranks[..a.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let z = (u - n1 * n2 / 2.0) / var.sqrt();
    let normal = Normal::standard();
    let p = (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0);
    Ok((z, p))
}

pub const STATS_HEADER: &str = "algorithm,instance,mean,std,rank";
pub const CURVES_HEADER: &str = "algorithm,instance,seed,generation,gbest_cost";
pub const ACTIONS_HEADER: &str = "algorithm,instance,seed,generation,mean,std";

/// Writes `stats.csv`, `curves.csv` and `actions.csv` under `dir`. Output
/// depends only on the results, so re-exporting is byte-identical.
pub fn export_results(groups: &[Vec<RunResult>], dir: &Path) -> Result<()> {
    if groups.iter().all(|g| g.is_empty()) {
        return Err(GleetError::config("nothing to export"));
    }
    fs::create_dir_all(dir)?;
    let mut stats = format!("{STATS_HEADER}\n");
    for row in rank_table(groups)? {
        let _ = writeln!(
            stats,
            "{},{},{:?},{:?},{:?}",
            row.algorithm, row.instance, row.mean, row.std, row.rank
        );
    }
    let mut curves = format!("{CURVES_HEADER}\n");
    let mut actions = format!("{ACTIONS_HEADER}\n");
    for r in groups.iter().flatten() {
        for (g, c) in r.curve.iter().enumerate() {
            let _ = writeln!(curves, "{},{},{},{},{:?}", r.algorithm, r.instance, r.seed, g + 1, c);
        }
        for (g, (m, s)) in r.action_mean.iter().zip(&r.action_std).enumerate() {
            let _ = writeln!(actions, "{},{},{},{},{:?},{:?}", r.algorithm, r.instance, r.seed, g + 1, m, s);
        }
    }
    fs::write(dir.join("stats.csv"), stats)?;
    fs::write(dir.join("curves.csv"), curves)?;
    fs::write(dir.join("actions.csv"), actions)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::NetworkConfig;
    use crate::suite::{Bounds, ProblemClass};

    fn result(alg: &str, instance: usize, seed: u64, cost: f64) -> RunResult {
        RunResult {
            algorithm: alg.into(),
            instance,
            seed,
            final_cost: cost,
            curve: vec![cost],
            action_mean: vec![0.5],
            action_std: vec![0.0],
            clipped_out_of_range: 0,
            episode: Vec::new(),
            wall_time: 0.0,
        }
    }

    #[test]
    fn average_rank_examples() {
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
        assert_eq!(average_ranks(&[1.0, 1.0]), vec![1.5, 1.5]);
        assert_eq!(average_ranks(&[4.0]), vec![1.0]);
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 0.0]), vec![3.5, 2.0, 3.5, 1.0]);
    }

    #[test]
    fn rank_table_requires_shared_grid() {
        let a = vec![result("a", 0, 1, 1.0), result("a", 0, 2, 3.0)];
        let b = vec![result("b", 0, 1, 5.0), result("b", 0, 2, 5.0)];
        let rows = rank_table(&[a.clone(), b]).unwrap();
        assert_eq!(rows[0].mean, 2.0);
        assert_eq!((rows[0].rank, rows[1].rank), (1.0, 2.0));
        assert!((rows[0].std - 2f64.sqrt()).abs() < 1e-12);
        let c = vec![result("c", 0, 1, 5.0), result("c", 0, 3, 5.0)];
        assert!(matches!(rank_table(&[a, c]), Err(GleetError::GridMismatch(_))));
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap_percent(2.0, 2.0).unwrap(), 0.0);
        assert!((gap_percent(1.1, 1.0).unwrap() - 10.0).abs() < 1e-9);
        assert!((gap_percent(0.9, 1.0).unwrap() + 10.0).abs() < 1e-9);
        assert!(gap_percent(1.0, 0.0).is_err());
    }

    #[test]
    fn rank_sum_matches_hand_computation() {
        // a = {1,2,3}, b = {4,5,6}: U = 0, mean 4.5, var = 9·7/12 = 5.25.
        let (z, p) = rank_sum_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((z + 4.5 / 5.25f64.sqrt()).abs() < 1e-12);
        assert!((p - 0.049534613435626).abs() < 1e-9, "p = {p}");
        let (z, p) = rank_sum_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!((z, p), (0.0, 1.0));
    }

    #[test]
    fn midpoint_policy_equals_static_baseline() {
        // A network whose actor outputs μ = 0.5 everywhere: zero actor weights.
        let cfg = NetworkConfig {
            embed_dim: 8,
            heads: 2,
            ff_hidden: 8,
            ..NetworkConfig::default()
        };
        let mut net = PolicyNetwork::new(cfg, 1).unwrap();
        for name in ["actor.w", "actor.b"] {
            let id = net.params.require(name).unwrap();
            net.params.tensor_mut(id).data_mut().fill(0.0);
        }
        let set = generate_split(ProblemClass::Mix, 1, 3, 2, Bounds::default(), 4).unwrap();
        let inst: Vec<_> = set.test_instances().cloned().collect();
        let env = EnvConfig {
            population: 6,
            fe_max: 120,
            ..EnvConfig::default()
        };
        let learned = evaluate_policy("mid", &net, &inst, env, 2, 10, false).unwrap();
        let fixed = run_static_baseline(&inst, env, 2, 10).unwrap();
        for (a, b) in learned.iter().zip(&fixed) {
            assert_eq!(a.curve, b.curve);
        }
    }

    #[test]
    fn curves_are_monotone_and_export_is_stable() {
        let set = generate_split(ProblemClass::Mix, 1, 2, 3, Bounds::default(), 1).unwrap();
        let inst: Vec<_> = set.test_instances().cloned().collect();
        for backbone in ["pso", "de"] {
            let env = EnvConfig {
                backbone: backbone.parse().unwrap(),
                population: 8,
                fe_max: 160,
                ..EnvConfig::default()
            };
            let res = run_static_baseline(&inst, env, 3, 0).unwrap();
            assert_eq!(res.len(), 6);
            for r in &res {
                assert_eq!(r.curve.len(), 19);
                assert!(r.curve.windows(2).all(|w| w[1] <= w[0]));
                assert_eq!(r.final_cost, r.curve.iter().copied().fold(f64::INFINITY, f64::min));
            }
            let again = run_static_baseline(&inst, env, 3, 0).unwrap();
            assert_eq!(
                res.iter().map(|r| &r.curve).collect::<Vec<_>>(),
                again.iter().map(|r| &r.curve).collect::<Vec<_>>()
            );
            let dir = tempfile::tempdir().unwrap();
            export_results(std::slice::from_ref(&res), dir.path()).unwrap();
            let first = fs::read(dir.path().join("curves.csv")).unwrap();
            export_results(&[res], dir.path()).unwrap();
            assert_eq!(fs::read(dir.path().join("curves.csv")).unwrap(), first);
            let rows = String::from_utf8(first).unwrap().lines().count() - 1;
            assert_eq!(rows, 2 * 3 * 19);
        }
    }

    #[test]
    fn cross_setting_regenerates_dimension() {
        let set = generate_split(ProblemClass::Mix, 2, 3, 5, Bounds::default(), 7).unwrap();
        let env = EnvConfig {
            population: 10,
            fe_max: 500,
            ..EnvConfig::default()
        };
        let over = CrossSetting {
            dim: Some(10),
            population: Some(20),
            fe_max: None,
        };
        let (inst, cfg) = apply_cross_setting(&set, env, over).unwrap();
        assert_eq!(inst.len(), 3);
        assert!(inst.iter().all(|i| i.dim == 10));
        assert_eq!(cfg.population, 20);
    }
}
