//! Finite-difference verification of the analytic gradients.

use super::{total_loss, total_loss_with_grads, LossWeights, SimilarityScale};
use crate::bundle::GrcModel;
use crate::data::UnifiedExample;
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` against the analytic
/// gradient at the sampled coordinates. The relative error denominator is
/// floored at 1e-4 so dead coordinates are compared absolutely instead of
/// amplifying finite-difference noise.
pub fn central_diff_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    theta: &mut [f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> GradCheckReport {
    let mut max_rel_err: f64 = 0.0;
    for &c in coords {
        let saved = theta[c];
        theta[c] = saved + h;
        let fp = f(theta);
        theta[c] = saved - h;
        let fm = f(theta);
        theta[c] = saved;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[c];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
        max_rel_err = max_rel_err.max(rel);
    }
    GradCheckReport {
        max_rel_err,
        coords_checked: coords.len(),
    }
}

/// Check the combined-loss gradients on a random coordinate subsample of
/// at least `min_coords`, always including latent-bank and adapter
/// coordinates.
pub fn grad_check(
    model: &GrcModel,
    example: &UnifiedExample,
    weights: &LossWeights,
    scale: &SimilarityScale,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = total_loss_with_grads(example, model, weights, scale)?;
    let analytic = grads.to_flat();
    let mut theta = model.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut coords = Vec::new();
    for (name, range) in model.param_groups() {
        if name == "latent_bank" || name.starts_with("adapter") {
            let want = range.len().min(24);
            for _ in 0..want {
                coords.push(rng.gen_range(range.clone()));
            }
        }
    }
    let total = theta.len();
    while coords.len() < min_coords {
        coords.push(rng.gen_range(0..total));
    }
    coords.sort_unstable();
    coords.dedup();

    let mut scratch = model.clone();
    let mut f = |flat: &[f64]| {
        scratch.set_from_flat(flat);
        total_loss(example, &scratch, weights, scale)
            .expect("loss evaluation failed during finite differences")
            .total
    };
    Ok(central_diff_check(&mut f, &mut theta, &analytic, &coords, 1e-5))
}
