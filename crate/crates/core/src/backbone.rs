//! Population dynamics of the two controlled optimizers.
//!
//! Both steps take per-individual hyperparameters from the caller, draw all
//! of their random numbers serially in individual order, and only then
//! evaluate the candidates. A step that does not fit the remaining budget
//! is rejected before any state (or RNG) is touched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GleetError, Result};
use crate::suite::{evaluate, BudgetCounter, ProblemInstance};

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub positions: Vec<Vec<f64>>,
    /// Zero and unused for DE.
    pub velocities: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub pbest_pos: Vec<Vec<f64>>,
    pub pbest_cost: Vec<f64>,
    pub pbest_cost_initial: Vec<f64>,
    pub gbest_pos: Vec<f64>,
    pub gbest_cost: f64,
    pub gbest_cost_initial: f64,
    /// Generations since the global best last improved.
    pub stagnation_g: usize,
    /// Generations since each personal best last improved.
    pub stagnation_p: Vec<usize>,
    pub generation: usize,
}

impl Population {
    /// Uniform positions inside the instance bounds, zero velocities,
    /// evaluated once (charging `n` evaluations).
    pub fn init<R: Rng + ?Sized>(
        instance: &ProblemInstance,
        n: usize,
        rng: &mut R,
        counter: &mut BudgetCounter,
    ) -> Result<Self> {
        if n == 0 {
            return Err(GleetError::config("population size must be positive"));
        }
        if !counter.can_afford(n as u64) {
            return Err(GleetError::BudgetExceeded {
                used: counter.used(),
                requested: n as u64,
                max: counter.max(),
            });
        }
        let b = instance.bounds;
        let positions: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..instance.dim)
                    .map(|_| rng.random_range(b.lower..=b.upper))
                    .collect()
            })
            .collect();
        let costs = evaluate(instance, &positions, counter)?;
        let best = argmin(&costs);
        Ok(Self {
            velocities: vec![vec![0.0; instance.dim]; n],
            pbest_pos: positions.clone(),
            pbest_cost: costs.clone(),
            pbest_cost_initial: costs.clone(),
            gbest_pos: positions[best].clone(),
            gbest_cost: costs[best],
            gbest_cost_initial: costs[best],
            stagnation_g: 0,
            stagnation_p: vec![0; n],
            generation: 0,
            positions,
            costs,
        })
    }

    pub fn size(&self) -> usize {
        self.positions.len()
    }

    pub fn dim(&self) -> usize {
        self.gbest_pos.len()
    }

    /// Best cost among the current positions (not the historical best).
    pub fn current_best_cost(&self) -> f64 {
        self.costs[argmin(&self.costs)]
    }
}

/// Index of the first minimum.
pub(crate) fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

pub fn pso_init<R: Rng + ?Sized>(
    instance: &ProblemInstance,
    n: usize,
    rng: &mut R,
    counter: &mut BudgetCounter,
) -> Result<Population> {
    Population::init(instance, n, rng, counter)
}

/// Records the costs of the current positions and refreshes personal and
/// global bests. Only strict improvements replace a best; every individual
/// (and the swarm) that did not improve has its stagnation counter bumped.
pub fn update_bests(pop: &mut Population, new_costs: Vec<f64>) -> Result<()> {
    if new_costs.len() != pop.size() {
        return Err(GleetError::Shape(format!(
            "{} costs for {} individuals",
            new_costs.len(),
            pop.size()
        )));
    }
    pop.costs = new_costs;
    for i in 0..pop.size() {
        if pop.costs[i] < pop.pbest_cost[i] {
            pop.pbest_cost[i] = pop.costs[i];
            pop.pbest_pos[i].clone_from(&pop.positions[i]);
            pop.stagnation_p[i] = 0;
        } else {
            pop.stagnation_p[i] += 1;
        }
    }
    let best = argmin(&pop.pbest_cost);
    if pop.pbest_cost[best] < pop.gbest_cost {
        pop.gbest_cost = pop.pbest_cost[best];
        pop.gbest_pos.clone_from(&pop.pbest_pos[best]);
        pop.stagnation_g = 0;
    } else {
        pop.stagnation_g += 1;
    }
    Ok(())
}

/// Inertia weight policy for PSO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inertia {
    /// Linear decay from `start` to `end` as the evaluation budget is used.
    Linear { start: f64, end: f64 },
    Constant(f64),
}

impl Inertia {
    pub fn weight(&self, counter: &BudgetCounter) -> f64 {
        match *self {
            Inertia::Constant(w) => w,
            Inertia::Linear { start, end } => {
                let frac = counter.used() as f64 / counter.max().max(1) as f64;
                start + (end - start) * frac
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsoConfig {
    pub inertia: Inertia,
    /// Velocity limit as a fraction of the domain width, per coordinate.
    pub velocity_clamp: f64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            inertia: Inertia::Linear {
                start: 0.9,
                end: 0.4,
            },
            velocity_clamp: 0.2,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_w = |w: f64| w > 0.0 && w <= 1.0;
        let inertia_ok = match self.inertia {
            Inertia::Constant(w) => ok_w(w),
            Inertia::Linear { start, end } => ok_w(start) && ok_w(end),
        };
        if !inertia_ok {
            return Err(GleetError::config("inertia weight must lie in (0, 1]"));
        }
        if !(self.velocity_clamp > 0.0 && self.velocity_clamp <= 1.0) {
            return Err(GleetError::config("velocity clamp fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeConfig {
    pub p_best_fraction: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            p_best_fraction: 0.11,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_best_fraction > 0.0 && self.p_best_fraction <= 1.0) {
            return Err(GleetError::config("p_best_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Size of the top-p pool, never below 2.
    pub fn pool_size(&self, n: usize) -> usize {
        ((self.p_best_fraction * n as f64).ceil() as usize).max(2).min(n)
    }
}

/// One velocity component of the PSO update.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn pso_velocity(v: f64, x: f64, pbest: f64, gbest: f64, w: f64, c1: f64, c2: f64, r1: f64, r2: f64) -> f64 {
    w * v + c1 * r1 * (pbest - x) + c2 * r2 * (gbest - x)
}

/// One coordinate of the current-to-pbest/1 mutant.
#[inline]
pub fn de_mutant(x: f64, top: f64, r1: f64, r2: f64, f1: f64, f2: f64) -> f64 {
    x + f1 * (top - x) + f2 * (r1 - r2)
}

fn check_params(name: &str, values: &[f64], n: usize) -> Result<()> {
    if values.len() != n {
        return Err(GleetError::Shape(format!(
            "{name} has {} entries for {n} individuals",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(GleetError::NonFinite(format!("{name}[{i}]")));
    }
    Ok(())
}

/// One PSO generation with per-particle `c1`, `c2`.
///
/// For every particle and coordinate two fresh uniforms are drawn (one per
/// attraction term); velocities are clamped to `±clamp·width` and positions
/// to the bounds.
#[allow(clippy::too_many_arguments)]
pub fn pso_step<R: Rng + ?Sized>(
    pop: &mut Population,
    c1: &[f64],
    c2: &[f64],
    w: f64,
    cfg: &PsoConfig,
    rng: &mut R,
    instance: &ProblemInstance,
    counter: &mut BudgetCounter,
) -> Result<()> {
    let n = pop.size();
    check_params("c1", c1, n)?;
    check_params("c2", c2, n)?;
    if !counter.can_afford(n as u64) {
        return Err(GleetError::BudgetExceeded {
            used: counter.used(),
            requested: n as u64,
            max: counter.max(),
        });
    }
    let b = instance.bounds;
    let vmax = cfg.velocity_clamp * b.width();
    let mut positions = pop.positions.clone();
    let mut velocities = pop.velocities.clone();
    for i in 0..n {
        let (x, v) = (&mut positions[i], &mut velocities[i]);
        for j in 0..x.len() {
            let r1: f64 = rng.random();
            let r2: f64 = rng.random();
            let nv = pso_velocity(
                v[j],
                x[j],
                pop.pbest_pos[i][j],
                pop.gbest_pos[j],
                w,
                c1[i],
                c2[i],
                r1,
                r2,
            )
            .clamp(-vmax, vmax);
            v[j] = nv;
            x[j] = (x[j] + nv).clamp(b.lower, b.upper);
        }
    }
    let costs = evaluate(instance, &positions, counter)?;
    pop.positions = positions;
    pop.velocities = velocities;
    update_bests(pop, costs)?;
    pop.generation += 1;
    Ok(())
}

/// Draws an index uniformly from `0..n` skipping everything in `exclude`.
fn draw_excluding<R: Rng + ?Sized>(rng: &mut R, n: usize, exclude: &[usize]) -> usize {
    let mut k = rng.random_range(0..n - exclude.len());
    let mut sorted = exclude.to_vec();
    sorted.sort_unstable();
    for e in sorted {
        if k >= e {
            k += 1;
        }
    }
    k
}

/// One DE/current-to-pbest/1/bin generation with per-individual `F1`, `F2`
/// and `Cr`, followed by greedy parent-vs-trial selection.
///
/// Per individual the draw order is: `x_tpb` from the top-p pool (minus
/// `i`), then `r1`, `r2` (distinct from each other, `i` and `x_tpb`), then
/// `jrand`, then one crossover uniform per coordinate.
#[allow(clippy::too_many_arguments)]
pub fn de_step<R: Rng + ?Sized>(
    pop: &mut Population,
    f1: &[f64],
    f2: &[f64],
    cr: &[f64],
    cfg: &DeConfig,
    rng: &mut R,
    instance: &ProblemInstance,
    counter: &mut BudgetCounter,
) -> Result<()> {
    let n = pop.size();
    if n < 4 {
        return Err(GleetError::config(format!(
            "DE needs at least 4 individuals, got {n}"
        )));
    }
    check_params("F1", f1, n)?;
    check_params("F2", f2, n)?;
    check_params("Cr", cr, n)?;
    if !counter.can_afford(n as u64) {
        return Err(GleetError::BudgetExceeded {
            used: counter.used(),
            requested: n as u64,
            max: counter.max(),
        });
    }
    let b = instance.bounds;
    let d = pop.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| pop.costs[a].total_cmp(&pop.costs[c]).then(a.cmp(&c)));
    let pool = &order[..cfg.pool_size(n)];

    let mut trials = Vec::with_capacity(n);
    for i in 0..n {
        let candidates: Vec<usize> = pool.iter().copied().filter(|&k| k != i).collect();
        let tpb = candidates[rng.random_range(0..candidates.len())];
        let r1 = draw_excluding(rng, n, &[i, tpb]);
        let r2 = draw_excluding(rng, n, &[i, tpb, r1]);
        let jrand = rng.random_range(0..d);
        let x = &pop.positions[i];
        let mut u = x.clone();
        for j in 0..d {
            let take = rng.random::<f64>() <= cr[i] || j == jrand;
            if take {
                let v = de_mutant(
                    x[j],
                    pop.positions[tpb][j],
                    pop.positions[r1][j],
                    pop.positions[r2][j],
                    f1[i],
                    f2[i],
                );
                u[j] = v.clamp(b.lower, b.upper);
            }
        }
        trials.push(u);
    }
    let trial_costs = evaluate(instance, &trials, counter)?;
    let mut new_costs = pop.costs.clone();
    for (i, (u, cost)) in trials.into_iter().zip(trial_costs).enumerate() {
        if cost <= pop.costs[i] {
            pop.positions[i] = u;
            new_costs[i] = cost;
        }
    }
    update_bests(pop, new_costs)?;
    pop.generation += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::suite::{augment, BaseFunction, Bounds};
    use rand::RngCore;

    /// Always yields 0.5 from `random::<f64>()`.
    struct Half;

    impl RngCore for Half {
        fn next_u32(&mut self) -> u32 {
            1 << 31
        }
        fn next_u64(&mut self) -> u64 {
            1 << 63
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0);
        }
    }

    fn sphere_like(dim: usize) -> ProblemInstance {
        augment(BaseFunction::Rastrigin, dim, Bounds::default(), 0, &mut rng_for(1, 0)).unwrap()
    }

    fn one_particle(x: f64, v: f64, pbest: f64, gbest: f64) -> Population {
        Population {
            positions: vec![vec![x]],
            velocities: vec![vec![v]],
            costs: vec![1.0],
            pbest_pos: vec![vec![pbest]],
            pbest_cost: vec![1.0],
            pbest_cost_initial: vec![1.0],
            gbest_pos: vec![gbest],
            gbest_cost: 1.0,
            gbest_cost_initial: 1.0,
            stagnation_g: 0,
            stagnation_p: vec![0],
            generation: 0,
        }
    }

    #[test]
    fn hand_substituted_velocity() {
        assert_eq!(Half.random::<f64>(), 0.5);
        let inst = sphere_like(1);
        let mut pop = one_particle(0.0, 1.0, 2.0, 4.0);
        let cfg = PsoConfig::default();
        let mut counter = BudgetCounter::new(10);
        pso_step(&mut pop, &[1.0], &[1.0], 0.5, &cfg, &mut Half, &inst, &mut counter).unwrap();
        assert_eq!(pop.velocities[0][0], 3.5);
        assert_eq!(pop.positions[0][0], 3.5);
        assert_eq!(counter.used(), 1);
    }

    #[test]
    fn hand_substituted_mutant() {
        assert!((de_mutant(0.0, 1.0, 2.0, 0.0, 0.5, 0.3) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn frozen_swarm_stays_put() {
        let inst = sphere_like(3);
        let mut counter = BudgetCounter::new(100);
        let mut rng = rng_for(3, 0);
        let mut pop = pso_init(&inst, 5, &mut rng, &mut counter).unwrap();
        let before = pop.positions.clone();
        let cfg = PsoConfig::default();
        pso_step(&mut pop, &[0.0; 5], &[0.0; 5], 0.0, &cfg, &mut rng, &inst, &mut counter).unwrap();
        assert_eq!(pop.positions, before);
        assert!(pop.velocities.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn attraction_vanishes_at_the_bests() {
        let v = pso_velocity(1.5, 2.0, 2.0, 2.0, 0.7, 3.0, 1.0, 0.3, 0.9);
        assert_eq!(v, 0.7 * 1.5);
    }

    #[test]
    fn init_counts_and_tracks_best() {
        let inst = sphere_like(4);
        let mut counter = BudgetCounter::new(1000);
        let pop = pso_init(&inst, 100, &mut rng_for(5, 0), &mut counter).unwrap();
        assert_eq!(counter.used(), 100);
        let min = pop.pbest_cost.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(pop.gbest_cost, min);
        let again = pso_init(&inst, 100, &mut rng_for(5, 0), &mut BudgetCounter::new(1000)).unwrap();
        assert_eq!(pop, again);
    }

    #[test]
    fn budget_overrun_leaves_state_untouched() {
        let inst = sphere_like(2);
        let mut counter = BudgetCounter::new(15);
        let mut rng = rng_for(5, 0);
        let mut pop = pso_init(&inst, 10, &mut rng, &mut counter).unwrap();
        let snapshot = pop.clone();
        let cfg = PsoConfig::default();
        let err = pso_step(&mut pop, &[2.0; 10], &[2.0; 10], 0.5, &cfg, &mut rng, &inst, &mut counter);
        assert!(matches!(err, Err(GleetError::BudgetExceeded { .. })));
        assert_eq!(pop, snapshot);
        assert_eq!(counter.used(), 10);
        let de = de_step(&mut pop, &[0.5; 10], &[0.5; 10], &[0.5; 10], &DeConfig::default(), &mut rng, &inst, &mut counter);
        assert!(de.is_err());
        assert_eq!(pop, snapshot);
    }

    #[test]
    fn de_rejects_small_population() {
        let inst = sphere_like(2);
        let mut counter = BudgetCounter::new(100);
        let mut rng = rng_for(5, 0);
        let mut pop = Population::init(&inst, 3, &mut rng, &mut counter).unwrap();
        let r = de_step(&mut pop, &[0.5; 3], &[0.5; 3], &[0.5; 3], &DeConfig::default(), &mut rng, &inst, &mut counter);
        assert!(r.is_err());
    }

    #[test]
    fn update_bests_rules() {
        let mut pop = one_particle(0.0, 0.0, 0.0, 0.0);
        update_bests(&mut pop, vec![2.0]).unwrap();
        assert_eq!((pop.stagnation_g, pop.stagnation_p[0]), (1, 1));
        update_bests(&mut pop, vec![1.0]).unwrap();
        assert_eq!(pop.stagnation_g, 2, "ties do not count as improvement");
        pop.positions[0][0] = 7.0;
        update_bests(&mut pop, vec![0.5]).unwrap();
        assert_eq!((pop.stagnation_g, pop.gbest_cost), (0, 0.5));
        assert_eq!(pop.gbest_pos, vec![7.0]);
        assert!(update_bests(&mut pop, vec![]).is_err());
    }

    #[test]
    fn draw_excluding_never_hits_excluded() {
        let mut rng = rng_for(8, 0);
        for _ in 0..500 {
            let k = draw_excluding(&mut rng, 5, &[3, 0, 4]);
            assert!(k == 1 || k == 2);
        }
    }

    #[test]
    fn pool_has_at_least_two() {
        let cfg = DeConfig::default();
        assert_eq!(cfg.pool_size(4), 2);
        assert_eq!(cfg.pool_size(100), 11);
    }
}
