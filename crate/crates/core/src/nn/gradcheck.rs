//! Central finite-difference gradient checker.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Compares an analytic gradient against central finite differences
/// (f(x+eps) - f(x-eps)) / (2 eps) on a random sample of coordinates and
/// returns the maximum relative error |a - n| / max(|a|, |n|, 1e-8).
///
/// When the parameter vector has at most `sample_size` coordinates every
/// coordinate is checked; otherwise `sample_size` distinct coordinates are
/// drawn with the given seed.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic_grad: &[f64],
    eps: f64,
    sample_size: usize,
    seed: u64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic_grad.len());
    let coords: Vec<usize> = if params.len() <= sample_size {
        (0..params.len()).collect()
    } else {
        let mut all: Vec<usize> = (0..params.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(sample_size);
        all
    };

    let mut scratch = params.to_vec();
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let original = scratch[i];
        scratch[i] = original + eps;
        let plus = loss_fn(&scratch);
        scratch[i] = original - eps;
        let minus = loss_fn(&scratch);
        scratch[i] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = analytic_grad[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    max_rel
}
