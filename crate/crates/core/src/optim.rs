//! Box-constrained quasi-Newton minimization (projected BFGS with an
//! Armijo backtracking search along the projected path).

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Stop once the projected gradient norm falls below this.
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iters: 200, grad_tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iters: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn projected_grad_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((x, g), (l, h))| {
            let p = x - (x - g).clamp(*l, *h);
            p * p
        })
        .sum::<f64>()
        .sqrt()
}

/// Central-difference gradient, switching to one-sided steps at the bounds.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        let up = (x[i] + h).min(hi[i]);
        let down = (x[i] - h).max(lo[i]);
        if up - down <= 0.0 {
            continue;
        }
        probe[i] = up;
        let fu = f(&probe);
        probe[i] = down;
        let fd = f(&probe);
        probe[i] = x[i];
        g[i] = if fu.is_finite() && fd.is_finite() { (fu - fd) / (up - down) } else { 0.0 };
    }
    g
}

/// Minimize `obj` over the box `[lo, hi]` starting from `x0`.
///
/// `obj` returns the value and gradient. Non-finite values are treated as
/// infeasible and make the line search back off.
pub fn minimize_box<F>(mut obj: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut f, mut g) = obj(&x);
    if !f.is_finite() {
        return Minimum { x, value: f64::INFINITY, iters: 0, converged: false };
    }
    let mut h = identity(n);
    let mut first = true;
    for iter in 0..opts.max_iters {
        if projected_grad_norm(&x, &g, lo, hi) <= opts.grad_tol {
            return Minimum { x, value: f, iters: iter, converged: true };
        }
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0))
            .collect();
        let mut d = direction(&h, &g, &active);
        let mut slope: f64 = d.iter().zip(&g).map(|(d, g)| d * g).sum();
        if slope >= 0.0 {
            h = identity(n);
            d = direction(&h, &g, &active);
            slope = d.iter().zip(&g).map(|(d, g)| d * g).sum();
            if slope >= 0.0 {
                return Minimum { x, value: f, iters: iter, converged: true };
            }
        }
        let mut step = if first {
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            (1.0 / norm).min(1.0)
        } else {
            1.0
        };
        first = false;

        let mut accepted = None;
        for _ in 0..50 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + step * d).collect();
            project(&mut trial, lo, hi);
            let decrease: f64 = trial.iter().zip(&x).zip(&g).map(|((t, x), g)| (t - x) * g).sum();
            let (ft, gt) = obj(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * decrease.min(0.0) {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            return Minimum { x, value: f, iters: iter, converged: false };
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let yy = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * ss * yy {
            bfgs_update(&mut h, &s, &y, sy);
        }
        let small_step = ss <= 1e-14 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt());
        let small_change = (f - fnew).abs() <= 1e-15 * (1.0 + f.abs());
        x = xn;
        f = fnew;
        g = gn;
        if small_step && small_change {
            let converged = projected_grad_norm(&x, &g, lo, hi) <= opts.grad_tol.max(1e-4);
            return Minimum { x, value: f, iters: iter + 1, converged };
        }
    }
    let converged = projected_grad_norm(&x, &g, lo, hi) <= opts.grad_tol;
    Minimum { x, value: f, iters: opts.max_iters, converged }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn direction(h: &[Vec<f64>], g: &[f64], active: &[bool]) -> Vec<f64> {
    let n = g.len();
    (0..n)
        .map(|i| {
            if active[i] {
                0.0
            } else {
                -(0..n).filter(|j| !active[*j]).map(|j| h[i][j] * g[j]).sum::<f64>()
            }
        })
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}
