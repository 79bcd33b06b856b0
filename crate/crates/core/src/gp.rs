//! Single-level Gaussian process: profiled likelihood, maximum-likelihood
//! fitting and the conditional posterior.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, factor_with_jitter, KernelKind, LengthscaleVector, DEFAULT_JITTER};
use crate::optim::{self, BfgsOptions};
use crate::par::{self, Exec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iters: usize,
    /// Log-space lengthscale bounds applied to every coordinate. When absent,
    /// bounds are `[0.01 D, 100 D]` per coordinate with `D` the data range
    /// (`D^2` for the squared exponential, which divides squared distances).
    pub lengthscale_bounds: Option<(f64, f64)>,
    pub rng_seed: u64,
    pub jitter: f64,
    pub exec: Exec,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 5,
            max_iters: 200,
            lengthscale_bounds: None,
            rng_seed: 0,
            jitter: DEFAULT_JITTER,
            exec: Exec::default(),
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if let Some((lo, hi)) = self.lengthscale_bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidParameter(format!("lengthscale bounds ({lo}, {hi}) are not ordered")));
            }
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::InvalidParameter(format!("jitter {} must be nonnegative", self.jitter)));
        }
        Ok(())
    }
}

/// Profiled negative log-likelihood together with the profiled mean and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Likelihood {
    pub value: f64,
    pub alpha_hat: f64,
    pub tau_sq_hat: f64,
}

/// A fitted level: hyperparameters plus cached factorizations.
#[derive(Debug, Clone)]
pub struct LevelModel {
    pub level_index: usize,
    pub kernel_kind: KernelKind,
    pub scales: LengthscaleVector,
    pub alpha: f64,
    pub tau_sq: f64,
    /// Jitter that was actually used for the factorization.
    pub jitter: f64,
    pub nll: f64,
    theta: Vec<f64>,
    design: Vec<Vec<f64>>,
    outputs: Vec<f64>,
    chol: DMatrix<f64>,
    kinv: DMatrix<f64>,
    kinv_resid: DVector<f64>,
}

fn tau_floor(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1e-12 * var
    } else {
        1e-300
    }
}

struct Profile {
    alpha: f64,
    tau_sq: f64,
    value: f64,
    resid_solve: DVector<f64>,
}

fn profile(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, y: &[f64]) -> Profile {
    let n = y.len();
    let yv = DVector::from_column_slice(y);
    let ones = DVector::from_element(n, 1.0);
    let kinv_one = chol.solve(&ones);
    let kinv_y = chol.solve(&yv);
    let alpha = kinv_y.sum() / kinv_one.sum();
    let resid = &yv - DVector::from_element(n, alpha);
    let resid_solve = &kinv_y - &kinv_one * alpha;
    let quad = resid.dot(&resid_solve).max(0.0);
    let tau_sq = (quad / n as f64).max(tau_floor(y));
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let value = if n < 2 { f64::INFINITY } else { 0.5 * n as f64 * tau_sq.ln() + 0.5 * logdet };
    Profile { alpha, tau_sq, value, resid_solve }
}

fn check_data(design: &[Vec<f64>], outputs: &[f64], arity: usize) -> Result<()> {
    if design.is_empty() {
        return Err(Error::Argument("empty design".into()));
    }
    if design.len() != outputs.len() {
        return Err(Error::Shape { expected: design.len(), got: outputs.len() });
    }
    if let Some(p) = design.iter().find(|p| p.len() != arity) {
        return Err(Error::Shape { expected: arity, got: p.len() });
    }
    if design.iter().flatten().chain(outputs).any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite value in training data".into()));
    }
    Ok(())
}

/// Profiled negative log-likelihood, dropping additive constants.
///
/// A single observation has no information about the scale, so `n = 1`
/// returns `+inf`.
pub fn neg_log_likelihood(
    design: &[Vec<f64>],
    outputs: &[f64],
    kind: KernelKind,
    scales: &LengthscaleVector,
    jitter: f64,
) -> Result<Likelihood> {
    scales.validate()?;
    check_data(design, outputs, scales.arity())?;
    let (_, chol, _) = factor_with_jitter(kind, design, &scales.as_vec(), jitter)?;
    let p = profile(&chol, outputs);
    Ok(Likelihood { value: p.value, alpha_hat: p.alpha, tau_sq_hat: p.tau_sq })
}

/// Negative log-likelihood and its gradient with respect to `ln theta`.
fn nll_with_gradient(design: &[Vec<f64>], y: &[f64], kind: KernelKind, theta: &[f64], jitter: f64) -> (f64, Vec<f64>) {
    let n = design.len();
    let p = theta.len();
    let Ok((k, chol, _)) = factor_with_jitter(kind, design, theta, jitter) else {
        return (f64::INFINITY, vec![0.0; p]);
    };
    let prof = profile(&chol, y);
    if !prof.value.is_finite() {
        return (f64::INFINITY, vec![0.0; p]);
    }
    let kinv = chol.inverse();
    let r = &prof.resid_solve;
    let mut grad = vec![0.0; p];
    for a in 0..n {
        for b in 0..a {
            let w = kinv[(a, b)] - r[a] * r[b] / prof.tau_sq;
            let kab = k[(a, b)];
            if kab == 0.0 {
                continue;
            }
            for j in 0..p {
                let ratio = kernels::psi_dlog_ratio(kind, design[a][j] - design[b][j], theta[j]);
                // Symmetric pair counted once: 2 * (1/2) * w.
                grad[j] += kab * ratio * w;
            }
        }
    }
    (prof.value, grad)
}

fn coordinate_ranges(design: &[Vec<f64>]) -> Vec<f64> {
    let p = design[0].len();
    (0..p)
        .map(|j| {
            let lo = design.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
            let hi = design.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            let d = hi - lo;
            if d > 0.0 && d.is_finite() {
                d
            } else {
                1.0
            }
        })
        .collect()
}

fn log_bounds(design: &[Vec<f64>], kind: KernelKind, options: &FitOptions) -> (Vec<f64>, Vec<f64>) {
    let p = design[0].len();
    if let Some((lo, hi)) = options.lengthscale_bounds {
        return (vec![lo; p], vec![hi; p]);
    }
    let ranges = coordinate_ranges(design);
    let scale = |d: f64| if kind == KernelKind::SqExp { d * d } else { d };
    let lo = ranges.iter().map(|d| (1e-2 * scale(*d)).ln()).collect();
    let hi = ranges.iter().map(|d| (1e2 * scale(*d)).ln()).collect();
    (lo, hi)
}

fn median_start(design: &[Vec<f64>], kind: KernelKind, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let p = design[0].len();
    (0..p)
        .map(|j| {
            let mut d: Vec<f64> = Vec::new();
            for a in 0..design.len() {
                for b in 0..a {
                    let v = (design[a][j] - design[b][j]).abs();
                    if v > 0.0 {
                        d.push(v);
                    }
                }
            }
            let guess = if d.is_empty() {
                0.5 * (lo[j] + hi[j])
            } else {
                d.sort_by(f64::total_cmp);
                let m = d[d.len() / 2];
                if kind == KernelKind::SqExp {
                    (m * m).ln()
                } else {
                    m.ln()
                }
            };
            guess.clamp(lo[j], hi[j])
        })
        .collect()
}

/// Maximum-likelihood fit with profiled mean and scale.
pub fn fit_level(
    level_index: usize,
    design: &[Vec<f64>],
    outputs: &[f64],
    kind: KernelKind,
    options: &FitOptions,
) -> Result<LevelModel> {
    fit_level_warm(level_index, design, outputs, kind, options, None)
}

/// As [`fit_level`], adding `warm_start` (lengthscales, not logs) as one of
/// the starting points.
pub fn fit_level_warm(
    level_index: usize,
    design: &[Vec<f64>],
    outputs: &[f64],
    kind: KernelKind,
    options: &FitOptions,
    warm_start: Option<&[f64]>,
) -> Result<LevelModel> {
    options.validate()?;
    if design.is_empty() {
        return Err(Error::Fit { level: level_index, message: "no training points".into() });
    }
    let arity = design[0].len();
    check_data(design, outputs, arity).map_err(|e| Error::Fit { level: level_index, message: e.to_string() })?;
    if design.len() < 2 {
        return Err(Error::Fit { level: level_index, message: "at least two training points are required".into() });
    }
    let (lo, hi) = log_bounds(design, kind, options);
    let mut rng = ChaCha8Rng::seed_from_u64(options.rng_seed);
    let mut starts = vec![median_start(design, kind, &lo, &hi)];
    while starts.len() < options.restarts {
        starts.push((0..arity).map(|j| rng.random_range(lo[j]..=hi[j])).collect());
    }
    if let Some(w) = warm_start {
        if w.len() == arity && w.iter().all(|t| *t > 0.0 && t.is_finite()) {
            let s: Vec<f64> = w.iter().enumerate().map(|(j, t)| t.ln().clamp(lo[j], hi[j])).collect();
            if starts.len() > 1 {
                let last = starts.len() - 1;
                starts[last] = s;
            } else {
                starts.push(s);
            }
        }
    }

    let bfgs = BfgsOptions { max_iters: options.max_iters, grad_tol: 1e-6 };
    let jitter = options.jitter;
    let results = par::map(options.exec, &starts, |x0| {
        let obj = |phi: &[f64]| {
            let theta: Vec<f64> = phi.iter().map(|v| v.exp()).collect();
            let (v, g) = nll_with_gradient(design, outputs, kind, &theta, jitter);
            if v.is_finite() && g.iter().all(|x| x.is_finite()) {
                (v, g)
            } else if v.is_finite() {
                let mut f = |q: &[f64]| {
                    let t: Vec<f64> = q.iter().map(|v| v.exp()).collect();
                    nll_with_gradient(design, outputs, kind, &t, jitter).0
                };
                (v, optim::fd_gradient(&mut f, phi, &lo, &hi))
            } else {
                (v, g)
            }
        };
        optim::minimize_box(obj, x0, &lo, &hi, &bfgs)
    });

    let best = results
        .iter()
        .filter(|m| m.value.is_finite())
        .min_by(|a, b| a.value.total_cmp(&b.value));
    let Some(best) = best else {
        let tried: Vec<String> = starts
            .iter()
            .map(|s| format!("{:?}", s.iter().map(|v| v.exp()).collect::<Vec<_>>()))
            .collect();
        return Err(Error::Fit {
            level: level_index,
            message: format!("every restart failed to factorize; attempted lengthscales {}", tried.join(", ")),
        });
    };
    let theta: Vec<f64> = best.x.iter().map(|v| v.exp()).collect();
    let scales = LengthscaleVector::from_vec(&theta, level_index >= 2 && arity > 1)?;
    LevelModel::assemble(level_index, kind, scales, design.to_vec(), outputs.to_vec(), jitter, None)
        .map_err(|e| Error::Fit { level: level_index, message: e.to_string() })
}

impl LevelModel {
    /// Build a model from hyperparameters. With `hyper = None` the mean and
    /// scale are profiled from the data.
    pub fn assemble(
        level_index: usize,
        kind: KernelKind,
        scales: LengthscaleVector,
        design: Vec<Vec<f64>>,
        outputs: Vec<f64>,
        jitter: f64,
        hyper: Option<(f64, f64)>,
    ) -> Result<LevelModel> {
        scales.validate()?;
        check_data(&design, &outputs, scales.arity())?;
        let theta = scales.as_vec();
        let (_, chol, used) = factor_with_jitter(kind, &design, &theta, jitter)?;
        let prof = profile(&chol, &outputs);
        let (alpha, tau_sq) = match hyper {
            Some((a, t)) => {
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::InvalidParameter(format!("tau_sq {t} must be positive")));
                }
                (a, t)
            }
            None => (prof.alpha, prof.tau_sq),
        };
        let n = outputs.len();
        let resid = DVector::from_iterator(n, outputs.iter().map(|y| y - alpha));
        let kinv_resid = chol.solve(&resid);
        let kinv = chol.inverse();
        Ok(LevelModel {
            level_index,
            kernel_kind: kind,
            scales,
            alpha,
            tau_sq,
            jitter: used,
            nll: prof.value,
            theta,
            design,
            outputs,
            chol: chol.unpack(),
            kinv,
            kinv_resid,
        })
    }

    pub fn n(&self) -> usize {
        self.outputs.len()
    }

    /// Input arity: `d` at level 1, `d + 1` above.
    pub fn arity(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn design(&self) -> &[Vec<f64>] {
        &self.design
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Lower-triangular Cholesky factor of `K + jitter I`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn kinv(&self) -> &DMatrix<f64> {
        &self.kinv
    }

    /// `K^{-1} (y - alpha 1)`.
    pub fn kinv_resid(&self) -> &DVector<f64> {
        &self.kinv_resid
    }

    /// True when `z` coincides with training input `row`: input coordinates
    /// within `1e-12`, the augmented output coordinate within `1e-8` relative.
    fn coincident(&self, z: &[f64], row: &[f64]) -> bool {
        let d = self.scales.dim();
        let inputs = z[..d].iter().zip(&row[..d]).all(|(a, b)| (a - b).abs() <= 1e-12);
        inputs
            && z[d..]
                .iter()
                .zip(&row[d..])
                .all(|(a, b)| (a - b).abs() <= 1e-8 * (1.0 + a.abs().max(b.abs())))
    }

    /// Kernel vector between `z` and every training input.
    ///
    /// The jitter acts as a nugget at coincident inputs, so the model is the
    /// GP with covariance `tau^2 (psi + jitter * delta)`; it interpolates the
    /// data exactly whatever jitter the factorization needed.
    pub fn kvec(&self, z: &[f64]) -> DVector<f64> {
        self.kvec_flag(z).0
    }

    fn kvec_flag(&self, z: &[f64]) -> (DVector<f64>, bool) {
        let mut hit = false;
        let k = DVector::from_iterator(
            self.n(),
            self.design.iter().map(|row| {
                let v = kernels::correlation(self.kernel_kind, z, row, &self.theta);
                if self.coincident(z, row) {
                    hit = true;
                    v + self.jitter
                } else {
                    v
                }
            }),
        );
        (k, hit)
    }

    /// Posterior mean and variance at `z` (plain input at level 1, augmented
    /// `(x, y)` above).
    pub fn conditional_moments(&self, z: &[f64]) -> Result<(f64, f64)> {
        if z.len() != self.arity() {
            return Err(Error::Shape { expected: self.arity(), got: z.len() });
        }
        Ok(self.moments_unchecked(z))
    }

    pub(crate) fn moments_unchecked(&self, z: &[f64]) -> (f64, f64) {
        let (mean, var) = self.moments_raw(z);
        (mean, var.max(0.0))
    }

    /// Posterior mean and variance before clamping the variance at zero.
    pub(crate) fn moments_raw(&self, z: &[f64]) -> (f64, f64) {
        let (k, hit) = self.kvec_flag(z);
        let mean = self.alpha + k.dot(&self.kinv_resid);
        let prior = if hit { 1.0 + self.jitter } else { 1.0 };
        let v = self.chol.solve_lower_triangular(&k).unwrap_or(k);
        (mean, self.tau_sq * (prior - v.norm_squared()))
    }

    /// The same model conditioned on one more observation `(z, y)`, with
    /// hyperparameters held fixed. The inverse is updated by bordering and
    /// the Cholesky factor by appending a row, both in `O(n^2)`.
    pub fn with_appended_point(&self, z: &[f64], y: f64) -> Result<LevelModel> {
        if z.len() != self.arity() {
            return Err(Error::Shape { expected: self.arity(), got: z.len() });
        }
        if self.design.iter().any(|row| self.coincident(z, row)) {
            return Err(Error::Conditioning { jitter: self.jitter });
        }
        let n = self.n();
        let k = self.kvec(z);
        let diag = 1.0 + self.jitter;
        let kinv = bordered_inverse(&self.kinv, &k, diag).ok_or(Error::Conditioning { jitter: self.jitter })?;
        let row = self.chol.solve_lower_triangular(&k).ok_or(Error::Conditioning { jitter: self.jitter })?;
        let pivot = diag - row.norm_squared();
        if !(pivot > 0.0) {
            return Err(Error::Conditioning { jitter: self.jitter });
        }
        let mut chol = self.chol.clone().resize(n + 1, n + 1, 0.0);
        for j in 0..n {
            chol[(n, j)] = row[j];
        }
        chol[(n, n)] = pivot.sqrt();
        let mut design = self.design.clone();
        design.push(z.to_vec());
        let mut outputs = self.outputs.clone();
        outputs.push(y);
        let resid = DVector::from_iterator(n + 1, outputs.iter().map(|v| v - self.alpha));
        let kinv_resid = &kinv * resid;
        Ok(LevelModel {
            level_index: self.level_index,
            kernel_kind: self.kernel_kind,
            scales: self.scales.clone(),
            alpha: self.alpha,
            tau_sq: self.tau_sq,
            jitter: self.jitter,
            nll: f64::NAN,
            theta: self.theta.clone(),
            design,
            outputs,
            chol,
            kinv,
            kinv_resid,
        })
    }
}

/// Inverse of the bordered matrix `[[A, k], [k^T, c]]` from `A^{-1}`:
/// with `b = A^{-1} k` and `v = c - k^T b`, the result is
/// `[[A^{-1} + b b^T / v, -b / v], [-b^T / v, 1 / v]]`.
/// Returns `None` when the Schur complement `v` is not positive.
pub fn bordered_inverse(a_inv: &DMatrix<f64>, k: &DVector<f64>, c: f64) -> Option<DMatrix<f64>> {
    let n = a_inv.nrows();
    let b = a_inv * k;
    let v = c - k.dot(&b);
    if !(v > 0.0) || !v.is_finite() {
        return None;
    }
    let mut out = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = a_inv[(i, j)] + b[i] * b[j] / v;
        }
        out[(i, n)] = -b[i] / v;
        out[(n, i)] = -b[i] / v;
    }
    out[(n, n)] = 1.0 / v;
    Some(out)
}

/// Free-function form of [`LevelModel::conditional_moments`].
pub fn conditional_moments(model: &LevelModel, z: &[f64]) -> Result<(f64, f64)> {
    model.conditional_moments(z)
}
