//! Augmented problem classes: every instance is a base function composed
//! with a random shift and a random rotation, `F(x) = f(Mᵀ(x − o))`.

mod functions;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use functions::BaseFunction;

use crate::error::{GleetError, Result};
use crate::rng::rng_for;

/// Either a single base function or the round-robin mixture of all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemClass {
    Single(BaseFunction),
    Mix,
}

impl ProblemClass {
    /// Base function of the `i`-th generated instance.
    pub fn base_for(self, i: usize) -> BaseFunction {
        match self {
            ProblemClass::Single(b) => b,
            ProblemClass::Mix => BaseFunction::ALL[i % BaseFunction::ALL.len()],
        }
    }
}

impl fmt::Display for ProblemClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemClass::Single(b) => f.write_str(b.name()),
            ProblemClass::Mix => f.write_str("f_mix"),
        }
    }
}

impl FromStr for ProblemClass {
    type Err = GleetError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "f_mix" || s == "mix" {
            Ok(ProblemClass::Mix)
        } else {
            Ok(ProblemClass::Single(s.parse()?))
        }
    }
}

impl Serialize for ProblemClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProblemClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-coordinate box `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            lower: -100.0,
            upper: 100.0,
        }
    }
}

impl Bounds {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper {
            Ok(())
        } else {
            Err(GleetError::config(format!(
                "bounds [{}, {}] are not a finite non-empty interval",
                self.lower, self.upper
            )))
        }
    }

    /// Length of the box diagonal in `dim` dimensions.
    pub fn diameter(&self, dim: usize) -> f64 {
        self.width() * (dim as f64).sqrt()
    }
}

/// Shift sampling box as a fraction of the bounds around their centre; 0.8
/// maps `[-100, 100]` to `[-80, 80]`.
pub const DEFAULT_SHIFT_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub id: usize,
    pub base: BaseFunction,
    pub dim: usize,
    pub shift: Vec<f64>,
    /// Row-major `dim × dim` orthogonal matrix.
    pub rotation: Vec<f64>,
    pub bounds: Bounds,
}

impl ProblemInstance {
    /// `Mᵀ(x − o)`.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut z = vec![0.0; d];
        for i in 0..d {
            let diff = x[i] - self.shift[i];
            let row = &self.rotation[i * d..(i + 1) * d];
            for (zj, m) in z.iter_mut().zip(row) {
                *zj += m * diff;
            }
        }
        z
    }

    /// `F(x)` without touching any budget.
    pub fn cost(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(GleetError::Shape(format!(
                "point of length {} for a {}-dimensional instance",
                x.len(),
                self.dim
            )));
        }
        self.base.eval(&self.transform(x))
    }

    /// `max |MᵀM − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.rotation, self.dim)
    }
}

/// Evaluation counter for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCounter {
    used: u64,
    max: u64,
}

impl BudgetCounter {
    pub fn new(max: u64) -> Self {
        Self { used: 0, max }
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn max(&self) -> u64 {
        self.max
    }

    pub fn remaining(&self) -> u64 {
        self.max - self.used
    }

    pub fn can_afford(&self, n: u64) -> bool {
        self.used + n <= self.max
    }

    pub fn consume(&mut self, n: u64) -> Result<()> {
        if !self.can_afford(n) {
            return Err(GleetError::BudgetExceeded {
                used: self.used,
                requested: n,
                max: self.max,
            });
        }
        self.used += n;
        Ok(())
    }
}

/// Evaluates a batch of points, charging `points.len()` to `counter`. The
/// counter is untouched when the batch does not fit the budget.
pub fn evaluate(
    instance: &ProblemInstance,
    points: &[Vec<f64>],
    counter: &mut BudgetCounter,
) -> Result<Vec<f64>> {
    if !counter.can_afford(points.len() as u64) {
        return Err(GleetError::BudgetExceeded {
            used: counter.used(),
            requested: points.len() as u64,
            max: counter.max(),
        });
    }
    let costs = points
        .iter()
        .map(|p| instance.cost(p))
        .collect::<Result<Vec<_>>>()?;
    counter.consume(points.len() as u64)?;
    Ok(costs)
}

/// Haar-random orthogonal `d × d` matrix, row-major.
///
/// Gram-Schmidt (applied twice for stability) on the columns of a standard
/// Gaussian matrix; the implied `R` factor has a positive diagonal, which is
/// the sign convention that makes the QR factor uniformly distributed.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..d {
        for _ in 0..2 {
            for k in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, q) in tail[0].iter_mut().zip(&head[k]) {
                    *x -= dot * q;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for x in &mut cols[j] {
            *x /= norm;
        }
    }
    let mut m = vec![0.0; d * d];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            m[i * d + j] = *v;
        }
    }
    m
}

pub fn orthogonality_error(m: &[f64], d: usize) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            let dot: f64 = (0..d).map(|i| m[i * d + a] * m[i * d + b]).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Fresh instance of `base` with a random shift inside the safe sub-box and
/// a random rotation.
pub fn augment<R: Rng + ?Sized>(
    base: BaseFunction,
    dim: usize,
    bounds: Bounds,
    id: usize,
    rng: &mut R,
) -> Result<ProblemInstance> {
    if dim == 0 {
        return Err(GleetError::config("dimension must be at least 1"));
    }
    bounds.validate()?;
    let centre = 0.5 * (bounds.lower + bounds.upper);
    let half = 0.5 * bounds.width() * DEFAULT_SHIFT_FRACTION;
    let shift = (0..dim)
        .map(|_| rng.random_range(centre - half..centre + half))
        .collect();
    let rotation = random_orthogonal(dim, rng);
    Ok(ProblemInstance {
        id,
        base,
        dim,
        shift,
        rotation,
        bounds,
    })
}

/// A generated problem class with its train/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSet {
    pub class: ProblemClass,
    pub dim: usize,
    pub bounds: Bounds,
    pub seed: u64,
    pub instances: Vec<ProblemInstance>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProblemSet {
    pub fn train_instances(&self) -> impl Iterator<Item = &ProblemInstance> {
        self.train.iter().map(|&i| &self.instances[i])
    }

    pub fn test_instances(&self) -> impl Iterator<Item = &ProblemInstance> {
        self.test.iter().map(|&i| &self.instances[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: ProblemSet = serde_json::from_str(s)?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.instances.len();
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n || seen[i] {
                return Err(GleetError::config(format!(
                    "split index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(GleetError::config("split does not cover every instance"));
        }
        for inst in &self.instances {
            if inst.shift.len() != inst.dim || inst.rotation.len() != inst.dim * inst.dim {
                return Err(GleetError::config(format!(
                    "instance {} has inconsistent dimensions",
                    inst.id
                )));
            }
        }
        Ok(())
    }
}

/// Generates `n_train + n_test` instances of `class`; the first `n_train`
/// form the training split.
pub fn generate_split(
    class: ProblemClass,
    n_train: usize,
    n_test: usize,
    dim: usize,
    bounds: Bounds,
    seed: u64,
) -> Result<ProblemSet> {
    if n_train == 0 || n_test == 0 {
        return Err(GleetError::config("both splits need at least one instance"));
    }
    let mut rng = rng_for(seed, 0);
    let instances = (0..n_train + n_test)
        .map(|i| augment(class.base_for(i), dim, bounds, i, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProblemSet {
        class,
        dim,
        bounds,
        seed,
        instances,
        train: (0..n_train).collect(),
        test: (n_train..n_train + n_test).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_rotation_is_sign() {
        let mut rng = rng_for(4, 0);
        for _ in 0..10 {
            let m = random_orthogonal(1, &mut rng);
            assert!(m == [1.0] || m == [-1.0], "{m:?}");
        }
    }

    #[test]
    fn rotation_is_orthogonal_and_isometric() {
        let mut rng = rng_for(11, 0);
        let m = random_orthogonal(5, &mut rng);
        assert!(orthogonality_error(&m, 5) < 1e-8);
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mtv: Vec<f64> = (0..5)
            .map(|j| (0..5).map(|i| m[i * 5 + j] * v[i]).sum())
            .collect();
        let n1 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n2 = mtv.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n1 - n2).abs() < 1e-8);
    }

    #[test]
    fn shifted_optimum_and_unwound_rotation() {
        let mut rng = rng_for(2, 0);
        let inst = augment(BaseFunction::BentCigar, 3, Bounds::default(), 0, &mut rng).unwrap();
        assert_eq!(inst.cost(&inst.shift).unwrap(), 0.0);
        // x = o + M e1  =>  z = e1
        let x: Vec<f64> = (0..3).map(|i| inst.shift[i] + inst.rotation[i * 3]).collect();
        let want = BaseFunction::BentCigar.eval(&[1.0, 0.0, 0.0]).unwrap();
        assert!((inst.cost(&x).unwrap() - want).abs() < 1e-6);
        assert!(inst.shift.iter().all(|s| s.abs() < 80.0));
    }

    #[test]
    fn augment_is_deterministic() {
        let a = augment(BaseFunction::Ackley, 4, Bounds::default(), 0, &mut rng_for(9, 0)).unwrap();
        let b = augment(BaseFunction::Ackley, 4, Bounds::default(), 0, &mut rng_for(9, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let set = generate_split(
            ProblemClass::Single(BaseFunction::SchwefelLike),
            128,
            1024,
            10,
            Bounds::default(),
            1,
        )
        .unwrap();
        assert_eq!(set.instances.len(), 1152);
        assert!(set.train.iter().all(|i| !set.test.contains(i)));
        set.validate().unwrap();
    }

    #[test]
    fn mix_is_round_robin() {
        let set = generate_split(ProblemClass::Mix, 30, 30, 5, Bounds::default(), 3).unwrap();
        for (i, inst) in set.instances.iter().enumerate() {
            assert_eq!(inst.base, BaseFunction::ALL[i % 8]);
        }
    }

    #[test]
    fn evaluate_counts_and_rejects_overrun() {
        let set = generate_split(ProblemClass::Mix, 1, 1, 3, Bounds::default(), 5).unwrap();
        let inst = &set.instances[0];
        let mut counter = BudgetCounter::new(150);
        let pts = vec![vec![1.0, 2.0, 3.0]; 100];
        let a = evaluate(inst, &pts, &mut counter).unwrap();
        assert_eq!(counter.used(), 100);
        assert!(evaluate(inst, &pts, &mut counter).is_err());
        assert_eq!(counter.used(), 100);
        let b = evaluate(inst, &pts[..50], &mut counter).unwrap();
        assert_eq!(a[..50], b[..]);
        assert_eq!(evaluate(inst, std::slice::from_ref(&inst.shift), &mut BudgetCounter::new(1)).unwrap(), [0.0]);
    }

    #[test]
    fn class_strings() {
        assert_eq!("f_mix".parse::<ProblemClass>().unwrap(), ProblemClass::Mix);
        assert_eq!(
            "rastrigin".parse::<ProblemClass>().unwrap(),
            ProblemClass::Single(BaseFunction::Rastrigin)
        );
        let json = serde_json::to_string(&ProblemClass::Mix).unwrap();
        assert_eq!(json, "\"f_mix\"");
    }
}
