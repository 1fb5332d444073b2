//! Central finite-difference checks of analytic gradients (five-point stencil).

use rand::seq::index;
use rand::Rng;

use super::params::ToyModelParams;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so coordinates whose true
/// derivative is zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub const MIN_SAMPLES: usize = 200;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Fourth-order central difference `(8(f₊₁ − f₋₁) − (f₊₂ − f₋₂)) / 12ε`.
/// The two-point stencil's O(ε²) truncation swamps derivatives near the
/// relative floor.
fn five_point(epsilon: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p1, m1) = (at(epsilon)?, at(-epsilon)?);
    let (p2, m2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Domain(format!(
            "epsilon must lie in [1e-6, 1e-3], got {epsilon}"
        )));
    }
    Ok(())
}

/// Largest relative error between `grad` and central differences of `f` at
/// `x`, over `max(MIN_SAMPLES, ·)` sampled coordinates (all of them when the
/// dimension is smaller).
pub fn grad_check_vec<F, R>(
    x: &[f64],
    grad: &[f64],
    f: F,
    epsilon: f64,
    samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    check_epsilon(epsilon)?;
    if grad.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient",
            expected: x.len(),
            found: grad.len(),
        });
    }
    let count = samples.max(MIN_SAMPLES).min(x.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in index::sample(rng, x.len(), count) {
        let numeric = five_point(epsilon, |h| {
            probe[i] = x[i] + h;
            let v = f(&probe);
            probe[i] = x[i];
            Ok(v)
        })?;
        worst = worst.max(relative_error(grad[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check_vec`] over the flattened entries of `params`.
pub fn grad_check<F, R>(
    params: &ToyModelParams,
    analytic: &ToyModelParams,
    loss: F,
    epsilon: f64,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&ToyModelParams) -> Result<f64>,
    R: Rng + ?Sized,
{
    check_epsilon(epsilon)?;
    let grad = analytic.flatten();
    if grad.len() != params.num_params() {
        return Err(Error::ShapeMismatch(
            "gradient does not mirror the parameters".into(),
        ));
    }
    let count = MIN_SAMPLES.min(grad.len());
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in index::sample(rng, grad.len(), count) {
        let original = *probe.entry_mut(i).expect("index in range");
        let numeric = five_point(epsilon, |h| {
            *probe.entry_mut(i).expect("index in range") = original + h;
            let v = loss(&probe);
            *probe.entry_mut(i).expect("index in range") = original;
            v
        })?;
        worst = worst.max(relative_error(grad[i], numeric));
    }
    Ok(worst)
}
