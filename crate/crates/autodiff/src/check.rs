use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::params::{ParamGrads, ParamId, ParameterSet};

/// Which scalar coordinates a finite-difference check perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdSampling {
    All,
    /// Distinct coordinates drawn uniformly; every coordinate when `count`
    /// exceeds the parameter count.
    Random { count: usize, seed: u64 },
}

/// Compares `analytic` against central differences of `loss_fn`.
///
/// Returns the maximum over the sampled coordinates of
/// `|analytic - numeric| / max(1e-8, |numeric|)`; an empty parameter set
/// yields 0.
pub fn finite_difference_check<F>(
    params: &ParameterSet,
    analytic: &ParamGrads,
    mut loss_fn: F,
    step: f64,
    sampling: FdSampling,
) -> Result<f64>
where
    F: FnMut(&ParameterSet) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(AutodiffError::InvalidStep(step));
    }
    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |j| (id, j)))
        .collect();
    let chosen: Vec<(ParamId, usize)> = match sampling {
        FdSampling::All => coords,
        FdSampling::Random { count, seed } if count < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, coords.len(), count).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| coords[i]).collect()
        }
        FdSampling::Random { .. } => coords,
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (id, j) in chosen {
        let original = work.tensor(id).data()[j];
        work.tensor_mut(id).data_mut()[j] = original + step;
        let plus = loss_fn(&work)?;
        work.tensor_mut(id).data_mut()[j] = original - step;
        let minus = loss_fn(&work)?;
        work.tensor_mut(id).data_mut()[j] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AutodiffError::NonFinite(format!(
                "loss while perturbing `{}`[{j}]",
                params.name(id)
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic.get(id)[j] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
