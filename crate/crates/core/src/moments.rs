//! Expectations of the output-coordinate correlation under a Gaussian input.
//!
//! For `f ~ N(m, s^2)` these are `xi(y) = E[psi(f, y)]` and
//! `zeta(y, y') = E[psi(f, y) psi(f, y')]`, the two quantities the recursive
//! posterior needs.
//!
//! For the Matérn kernels the expectation is split at the kink(s) of `|f - y|`.
//! Every piece reduces to `∫ p(t) exp(-lambda t) N(t; delta, s^2) dt` over a
//! half line or a bounded interval, with `p` a polynomial of degree <= 4.
//! Completing the square turns that into moments of a truncated normal.
//! Those come from a forward recurrence when the truncation point is in the
//! bulk, and from a Miller backward recurrence normalized by the Mills ratio
//! in the far tail. The far-tail branch never forms `exp(lambda^2 s^2 / 2)`
//! explicitly.

use std::sync::OnceLock;

use crate::kernels::{psi_raw, KernelKind};
use crate::normal;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

type Poly = [f64; 5];

/// `E[psi(f, y; theta)]` for `f ~ N(mean, var)`.
pub fn xi(kind: KernelKind, y: f64, mean: f64, var: f64, theta: f64) -> f64 {
    let var = var.max(0.0);
    if var == 0.0 {
        return psi_raw(kind, mean - y, theta);
    }
    match kind {
        KernelKind::SqExp => {
            let d = y - mean;
            (-(d * d) / (theta + 2.0 * var)).exp() / (1.0 + 2.0 * var / theta).sqrt()
        }
        KernelKind::Matern15 | KernelKind::Matern25 => {
            let a = rate(kind, theta);
            let p = side_poly(kind, a, 0.0);
            let s = var.sqrt();
            let delta = mean - y;
            half_line(&p, a, delta, s) + half_line(&p, a, -delta, s)
        }
    }
}

/// `E[psi(f, y; theta) psi(f, y'; theta)]` for `f ~ N(mean, var)`.
///
/// Symmetric in `(y, y')`; the Matérn branch orders the pair internally.
pub fn zeta(kind: KernelKind, y: f64, y2: f64, mean: f64, var: f64, theta: f64) -> f64 {
    let var = var.max(0.0);
    if var == 0.0 {
        return psi_raw(kind, mean - y, theta) * psi_raw(kind, mean - y2, theta);
    }
    match kind {
        KernelKind::SqExp => {
            let mid = 0.5 * (y + y2) - mean;
            let d = y - y2;
            let e = -(mid * mid) / (0.5 * theta + 2.0 * var) - d * d / (2.0 * theta);
            e.exp() / (1.0 + 4.0 * var / theta).sqrt()
        }
        KernelKind::Matern15 | KernelKind::Matern25 => {
            let (lo, hi) = if y <= y2 { (y, y2) } else { (y2, y) };
            let a = rate(kind, theta);
            let s = var.sqrt();
            let gap = hi - lo;
            let damp = (-a * gap).exp();
            if damp == 0.0 {
                return 0.0;
            }
            // Outside the pair: distances t and t + gap.
            let outer = mul(&side_poly(kind, a, 0.0), &side_poly(kind, a, gap));
            let left = half_line(&outer, 2.0 * a, lo - mean, s);
            let right = half_line(&outer, 2.0 * a, mean - hi, s);
            // Between the pair: distances t and gap - t, total decay a * gap.
            let inner = mul(&side_poly(kind, a, 0.0), &reflect(&side_poly(kind, a, 0.0), gap));
            let middle = if gap > 0.0 { interval(&inner, mean - lo, s, gap) } else { 0.0 };
            damp * (left + right + middle)
        }
    }
}

fn rate(kind: KernelKind, theta: f64) -> f64 {
    match kind {
        KernelKind::Matern15 => SQRT3 / theta,
        KernelKind::Matern25 => SQRT5 / theta,
        KernelKind::SqExp => unreachable!("squared exponential has closed forms"),
    }
}

/// Polynomial prefactor of the Matérn correlation at distance `t + shift`,
/// as coefficients in `t`.
fn side_poly(kind: KernelKind, a: f64, shift: f64) -> Poly {
    let u = a * shift;
    match kind {
        KernelKind::Matern15 => [1.0 + u, a, 0.0, 0.0, 0.0],
        _ => [1.0 + u + u * u / 3.0, a + 2.0 * a * u / 3.0, a * a / 3.0, 0.0, 0.0],
    }
}

fn mul(p: &Poly, q: &Poly) -> Poly {
    let mut r = [0.0; 5];
    for i in 0..5 {
        for j in 0..5 - i {
            r[i + j] += p[i] * q[j];
        }
    }
    r
}

/// Coefficients of `p(c - t)`.
fn reflect(p: &Poly, c: f64) -> Poly {
    let mut r = shift(p, c);
    for (k, v) in r.iter_mut().enumerate() {
        if k % 2 == 1 {
            *v = -*v;
        }
    }
    r
}

/// Coefficients of `p(t + c)`.
fn shift(p: &Poly, c: f64) -> Poly {
    let mut r = [0.0; 5];
    for (k, pk) in p.iter().enumerate() {
        if *pk == 0.0 {
            continue;
        }
        let mut binom = 1.0;
        for j in 0..=k {
            // C(k, j) c^(k - j) t^j
            r[j] += pk * binom * c.powi((k - j) as i32);
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
    }
    r
}

fn degree(p: &Poly) -> usize {
    p.iter().rposition(|v| *v != 0.0).unwrap_or(0)
}

/// Moments `G_k(z) = ∫_0^∞ u^k phi(u + z) du` for `k <= kmax`. For `z <= 3`
/// returns `(false, G)`; beyond, returns `(true, G / phi(z))` and leaves the
/// `phi(z)` factor to the caller.
fn truncated_moments(z: f64, kmax: usize) -> (bool, [f64; 5]) {
    let mut h = [0.0; 5];
    if z <= 3.0 {
        h[0] = normal::cdf(-z);
        if kmax >= 1 {
            h[1] = normal::pdf(z) - z * h[0];
        }
        for k in 1..kmax {
            h[k + 1] = k as f64 * h[k - 1] - z * h[k];
        }
        (false, h)
    } else {
        // Backward recurrence in ratio form: rho_k = h_k / h_{k-1} satisfies
        // rho_k = k / (z + rho_{k+1}); start deep enough that the truncation
        // is invisible, and anchor h_0 at the Mills ratio.
        let mut rho = [0.0; 5];
        let mut next = 0.0;
        for k in (1..=150usize).rev() {
            let r = k as f64 / (z + next);
            if k <= kmax {
                rho[k] = r;
            }
            next = r;
        }
        h[0] = normal::mills_ratio(z);
        for k in 1..=kmax {
            h[k] = h[k - 1] * rho[k];
        }
        (true, h)
    }
}

/// `∫_0^∞ p(t) exp(-lambda t) N(t; delta, s^2) dt`.
fn half_line(p: &Poly, lambda: f64, delta: f64, s: f64) -> f64 {
    let kmax = degree(p);
    let z = lambda * s - delta / s;
    let (tail, h) = truncated_moments(z, kmax);
    let mut acc = 0.0;
    let mut sk = 1.0;
    for k in 0..=kmax {
        acc += p[k] * sk * h[k];
        sk *= s;
    }
    if tail {
        // exp(-lambda delta + lambda^2 s^2 / 2) phi(z) simplifies to phi(delta / s).
        normal::pdf(delta / s) * acc
    } else {
        (-lambda * delta + 0.5 * lambda * lambda * s * s).exp() * acc
    }
}

fn legendre32() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| normal::gauss_legendre(32))
}

/// `∫_0^width p(t) N(t; delta, s^2) dt`.
fn interval(p: &Poly, delta: f64, s: f64, width: f64) -> f64 {
    if s >= 0.25 * width {
        // The density is smooth on the scale of the interval.
        let (x, w) = legendre32();
        let half = 0.5 * width;
        return x
            .iter()
            .zip(w)
            .map(|(x, w)| {
                let t = half * (x + 1.0);
                let mut v = 0.0;
                for c in p.iter().rev() {
                    v = v * t + c;
                }
                w * v * normal::pdf((t - delta) / s) / s
            })
            .sum::<f64>()
            * half;
    }
    // Keep the mean in the lower half so the two half-line pieces do not cancel.
    let (p, delta) = if delta > 0.5 * width { (reflect(p, width), width - delta) } else { (*p, delta) };
    let whole = half_line(&p, 0.0, delta, s);
    let beyond = half_line(&shift(&p, width), 0.0, delta - width, s);
    (whole - beyond).max(0.0)
}

/// Posterior-mean attenuation `E[psi(f, mu)]` for `f ~ N(mu, var)`: equals
/// `sqrt(theta / (theta + 2 var))` for the squared exponential.
pub fn attenuation(kind: KernelKind, var: f64, theta: f64) -> f64 {
    xi(kind, 0.0, 0.0, var, theta)
}
