//! Base objective functions. Each has its global minimum 0 at the origin and
//! is non-negative everywhere. Inputs are in problem units (the default
//! domain is `[-100, 100]^d`); functions with a natural domain of their own
//! rescale internally.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GleetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseFunction {
    /// `z1² + 1e6 Σ_{i≥2} zi²`.
    BentCigar,
    /// Rastrigin on `0.0512·z`.
    Rastrigin,
    /// Double-sum (Schwefel 1.2): `Σ_i (Σ_{j≤i} zj)²`.
    SchwefelLike,
    /// Rosenbrock on `0.02·z + 1`.
    RosenbrockLike,
    /// Expanded Griewank-of-Rosenbrock on `0.05·z + 1`, wrapping the last
    /// coordinate onto the first.
    GriewankRosenbrockLike,
    /// Ackley on `0.32768·z`.
    Ackley,
    /// Contiguous 30% / 30% / 40% coordinate split evaluated by Rastrigin,
    /// Schwefel-like and Rosenbrock-like respectively.
    Hybrid1,
    /// `min_k (λ_k f_k(z − o_k) + bias_k)` over three shifted components;
    /// the first is unshifted with zero bias.
    Composition1,
}

impl BaseFunction {
    pub const ALL: [BaseFunction; 8] = [
        BaseFunction::BentCigar,
        BaseFunction::Rastrigin,
        BaseFunction::SchwefelLike,
        BaseFunction::RosenbrockLike,
        BaseFunction::GriewankRosenbrockLike,
        BaseFunction::Ackley,
        BaseFunction::Hybrid1,
        BaseFunction::Composition1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaseFunction::BentCigar => "bent_cigar",
            BaseFunction::Rastrigin => "rastrigin",
            BaseFunction::SchwefelLike => "schwefel_like",
            BaseFunction::RosenbrockLike => "rosenbrock_like",
            BaseFunction::GriewankRosenbrockLike => "griewank_rosenbrock_like",
            BaseFunction::Ackley => "ackley",
            BaseFunction::Hybrid1 => "hybrid_1",
            BaseFunction::Composition1 => "composition_1",
        }
    }

    /// Cost at `z`, the already shifted and rotated point.
    pub fn eval(self, z: &[f64]) -> Result<f64> {
        if let Some(bad) = z.iter().position(|v| !v.is_finite()) {
            return Err(GleetError::NonFinite(format!(
                "{} input coordinate {bad}",
                self.name()
            )));
        }
        Ok(self.eval_unchecked(z))
    }

    pub(crate) fn eval_unchecked(self, z: &[f64]) -> f64 {
        match self {
            BaseFunction::BentCigar => bent_cigar(z),
            BaseFunction::Rastrigin => rastrigin(z),
            BaseFunction::SchwefelLike => schwefel_like(z),
            BaseFunction::RosenbrockLike => rosenbrock_like(z),
            BaseFunction::GriewankRosenbrockLike => griewank_rosenbrock_like(z),
            BaseFunction::Ackley => ackley(z),
            BaseFunction::Hybrid1 => hybrid_1(z),
            BaseFunction::Composition1 => composition_1(z),
        }
    }
}

impl fmt::Display for BaseFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaseFunction {
    type Err = GleetError;

    fn from_str(s: &str) -> Result<Self> {
        BaseFunction::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| GleetError::Parse(format!("unknown base function `{s}`")))
    }
}

fn bent_cigar(z: &[f64]) -> f64 {
    match z.split_first() {
        None => 0.0,
        Some((first, rest)) => first * first + 1e6 * rest.iter().map(|v| v * v).sum::<f64>(),
    }
}

fn rastrigin(z: &[f64]) -> f64 {
    z.iter()
        .map(|v| {
            let y = 0.0512 * v;
            y * y - 10.0 * (2.0 * PI * y).cos() + 10.0
        })
        .sum()
}

fn schwefel_like(z: &[f64]) -> f64 {
    let mut prefix = 0.0;
    let mut total = 0.0;
    for v in z {
        prefix += v;
        total += prefix * prefix;
    }
    total
}

fn rosen_pair(a: f64, b: f64) -> f64 {
    let t = a * a - b;
    100.0 * t * t + (a - 1.0) * (a - 1.0)
}

fn rosenbrock_like(z: &[f64]) -> f64 {
    let y: Vec<f64> = z.iter().map(|v| 0.02 * v + 1.0).collect();
    match y.len() {
        0 => 0.0,
        1 => (y[0] - 1.0) * (y[0] - 1.0),
        _ => y.windows(2).map(|w| rosen_pair(w[0], w[1])).sum(),
    }
}

fn griewank_rosenbrock_like(z: &[f64]) -> f64 {
    let d = z.len();
    let y: Vec<f64> = z.iter().map(|v| 0.05 * v + 1.0).collect();
    (0..d)
        .map(|i| {
            let r = rosen_pair(y[i], y[(i + 1) % d]);
            r * r / 4000.0 - r.cos() + 1.0
        })
        .sum()
}

fn ackley(z: &[f64]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    let d = z.len() as f64;
    let (mut sq, mut cs) = (0.0, 0.0);
    for v in z {
        let y = 0.32768 * v;
        sq += y * y;
        cs += (2.0 * PI * y).cos();
    }
    // Grouped so both terms are exactly zero at the origin.
    let radial = 20.0 * (1.0 - (-0.2 * (sq / d).sqrt()).exp());
    let periodic = 1.0f64.exp() - (cs / d).exp();
    (radial + periodic).max(0.0)
}

fn hybrid_split(d: usize) -> (usize, usize) {
    let n1 = (0.3 * d as f64).ceil() as usize;
    let n2 = ((0.3 * d as f64).ceil() as usize).min(d - n1.min(d));
    (n1.min(d), n2)
}

fn hybrid_1(z: &[f64]) -> f64 {
    let (n1, n2) = hybrid_split(z.len());
    rastrigin(&z[..n1]) + schwefel_like(&z[n1..n1 + n2]) + rosenbrock_like(&z[n1 + n2..])
}

const COMPOSITION_BIAS: [f64; 3] = [0.0, 100.0, 200.0];
const COMPOSITION_LAMBDA: [f64; 3] = [1.0, 1.0, 1e-4];

fn composition_offset(k: usize, j: usize) -> f64 {
    let sign = if j.is_multiple_of(2) { 1.0 } else { -1.0 };
    match k {
        0 => 0.0,
        1 => 20.0 * sign,
        _ => -30.0 * sign,
    }
}

fn composition_1(z: &[f64]) -> f64 {
    let bases = [
        BaseFunction::Rastrigin,
        BaseFunction::GriewankRosenbrockLike,
        BaseFunction::SchwefelLike,
    ];
    let mut best = f64::INFINITY;
    let mut shifted = vec![0.0; z.len()];
    for (k, base) in bases.iter().enumerate() {
        for (j, (s, v)) in shifted.iter_mut().zip(z).enumerate() {
            *s = v - composition_offset(k, j);
        }
        let value = COMPOSITION_LAMBDA[k] * base.eval_unchecked(&shifted) + COMPOSITION_BIAS[k];
        best = best.min(value);
    }
    best
}
