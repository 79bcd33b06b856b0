//! Standard normal density, distribution function and tail helpers.

use std::f64::consts::{PI, SQRT_2};

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal distribution function.
pub fn cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Mills ratio of the upper tail, `Phi(-z) / phi(z)`, for `z >= 0`.
///
/// Uses the erfc ratio for moderate `z` and Laplace's continued fraction
/// beyond, where the direct ratio would underflow.
pub fn mills_ratio(z: f64) -> f64 {
    debug_assert!(z >= 0.0);
    if z < 5.0 {
        return cdf(-z) / pdf(z);
    }
    // 1 / (z + 1 / (z + 2 / (z + 3 / (z + ...))))
    let mut acc = z;
    for k in (1..=60).rev() {
        acc = z + k as f64 / acc;
    }
    1.0 / acc
}

/// `ln Phi(z)`, accurate far into the lower tail.
pub fn ln_cdf(z: f64) -> f64 {
    if z > -5.0 {
        cdf(z).ln()
    } else {
        let t = -z;
        -0.5 * t * t - LN_SQRT_2PI + mills_ratio(t).ln()
    }
}

/// `ln(Phi(hi) - Phi(lo))` for `lo < hi`, computed from whichever tail keeps
/// the difference well conditioned. Returns `-inf` for an empty interval.
pub fn ln_interval_prob(lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return f64::NEG_INFINITY;
    }
    if lo > 0.0 {
        // Both in the upper tail: Phi(-lo) - Phi(-hi).
        let a = ln_cdf(-lo);
        let b = ln_cdf(-hi);
        a + (-(b - a).exp()).ln_1p()
    } else if hi < 0.0 {
        let a = ln_cdf(hi);
        let b = ln_cdf(lo);
        a + (-(b - a).exp()).ln_1p()
    } else {
        (cdf(hi) - cdf(lo)).ln()
    }
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * p - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}
