//! Prediction scores.

use crate::emulator::PosteriorMoments;
use crate::error::{Error, Result};
use crate::normal;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape { expected: a, got: b });
    }
    if a == 0 {
        return Err(Error::Argument("at least one prediction is required".into()));
    }
    Ok(())
}

/// Root-mean-square error.
pub fn rmse(means: &[f64], truths: &[f64]) -> Result<f64> {
    check_len(means.len(), truths.len())?;
    let sse: f64 = means.iter().zip(truths).map(|(m, t)| (m - t) * (m - t)).sum();
    Ok((sse / means.len() as f64).sqrt())
}

/// CRPS of `N(mean, sd^2)` against `truth`, in the nonnegative orientation
/// (smaller is better). `sd = 0` gives the absolute error.
pub fn crps_gaussian(mean: f64, sd: f64, truth: f64) -> Result<f64> {
    if !(sd >= 0.0) {
        return Err(Error::Argument(format!("negative predictive standard deviation {sd}")));
    }
    if sd == 0.0 {
        return Ok((truth - mean).abs());
    }
    let z = (truth - mean) / sd;
    let inv_sqrt_pi = std::f64::consts::FRAC_2_SQRT_PI / 2.0;
    Ok(sd * (z * (2.0 * normal::cdf(z) - 1.0) + 2.0 * normal::pdf(z) - inv_sqrt_pi))
}

/// Mean CRPS over a set of predictions.
pub fn crps(moments: &[PosteriorMoments], truths: &[f64]) -> Result<f64> {
    check_len(moments.len(), truths.len())?;
    let mut total = 0.0;
    for (p, t) in moments.iter().zip(truths) {
        if p.var < 0.0 {
            return Err(Error::Argument(format!("negative predictive variance {}", p.var)));
        }
        total += crps_gaussian(p.mean, p.var.sqrt(), *t)?;
    }
    Ok(total / moments.len() as f64)
}
