//! Correlation functions and covariance assembly.
//!
//! Lengthscale convention: the squared exponential divides the *squared*
//! distance by `theta`, `exp(-(x - x')^2 / theta)`, and the Matérn kernels
//! divide the plain distance, e.g. `(1 + sqrt(3) r / theta) exp(-sqrt(3) r / theta)`.
//! Many GP packages divide by `theta^2` or `2 theta^2` instead; hyperparameters
//! are therefore not interchangeable with those packages without conversion.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

/// Default diagonal regularization.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Largest jitter tried before giving up on a factorization.
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    SqExp,
    Matern15,
    Matern25,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [KernelKind::SqExp, KernelKind::Matern15, KernelKind::Matern25];

    /// Matérn smoothness, or `None` for the squared exponential.
    pub fn smoothness(self) -> Option<f64> {
        match self {
            KernelKind::SqExp => None,
            KernelKind::Matern15 => Some(1.5),
            KernelKind::Matern25 => Some(2.5),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::SqExp => "sqexp",
            KernelKind::Matern15 => "matern15",
            KernelKind::Matern25 => "matern25",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sqexp" | "se" | "gaussian" => Ok(KernelKind::SqExp),
            "matern15" | "matern1.5" => Ok(KernelKind::Matern15),
            "matern25" | "matern2.5" => Ok(KernelKind::Matern25),
            other => Err(Error::InvalidParameter(format!("unknown kernel kind `{other}`"))),
        }
    }
}

/// Per-dimension lengthscales; `output_scale` is the lengthscale of the
/// appended previous-level output and is present only for levels >= 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthscaleVector {
    pub input_scales: Vec<f64>,
    pub output_scale: Option<f64>,
}

impl LengthscaleVector {
    pub fn new(input_scales: Vec<f64>, output_scale: Option<f64>) -> Result<Self> {
        let v = LengthscaleVector { input_scales, output_scale };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t.is_finite() && t > 0.0;
        if self.input_scales.is_empty() {
            return Err(Error::InvalidParameter("lengthscale vector is empty".into()));
        }
        if let Some(bad) = self.input_scales.iter().find(|t| !ok(**t)) {
            return Err(Error::InvalidParameter(format!("lengthscale {bad} is not positive and finite")));
        }
        if let Some(t) = self.output_scale {
            if !ok(t) {
                return Err(Error::InvalidParameter(format!("output lengthscale {t} is not positive and finite")));
            }
        }
        Ok(())
    }

    /// Number of input coordinates (`d`).
    pub fn dim(&self) -> usize {
        self.input_scales.len()
    }

    /// Arity of points this vector parameterizes: `d` or `d + 1`.
    pub fn arity(&self) -> usize {
        self.dim() + usize::from(self.output_scale.is_some())
    }

    /// All lengthscales in point-coordinate order (output scale last).
    pub fn as_vec(&self) -> Vec<f64> {
        let mut v = self.input_scales.clone();
        v.extend(self.output_scale);
        v
    }

    pub fn from_vec(all: &[f64], augmented: bool) -> Result<Self> {
        if augmented {
            let (x, y) = all.split_at(all.len().saturating_sub(1));
            LengthscaleVector::new(x.to_vec(), y.first().copied())
        } else {
            LengthscaleVector::new(all.to_vec(), None)
        }
    }
}

/// One-dimensional correlation without parameter checks.
#[inline]
pub(crate) fn psi_raw(kind: KernelKind, diff: f64, theta: f64) -> f64 {
    match kind {
        KernelKind::SqExp => (-(diff * diff) / theta).exp(),
        KernelKind::Matern15 => {
            let s = SQRT3 * diff.abs() / theta;
            (1.0 + s) * (-s).exp()
        }
        KernelKind::Matern25 => {
            let s = SQRT5 * diff.abs() / theta;
            (1.0 + s + s * s / 3.0) * (-s).exp()
        }
    }
}

/// `(d psi / d ln theta) / psi` for a single coordinate difference.
#[inline]
pub(crate) fn psi_dlog_ratio(kind: KernelKind, diff: f64, theta: f64) -> f64 {
    match kind {
        KernelKind::SqExp => diff * diff / theta,
        KernelKind::Matern15 => {
            let s = SQRT3 * diff.abs() / theta;
            s * s / (1.0 + s)
        }
        KernelKind::Matern25 => {
            let s = SQRT5 * diff.abs() / theta;
            s * s * (1.0 + s) / (3.0 * (1.0 + s + s * s / 3.0))
        }
    }
}

/// One-dimensional correlation `psi(x, x'; theta)`.
pub fn psi(kind: KernelKind, x: f64, x2: f64, theta: f64) -> Result<f64> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(Error::InvalidParameter(format!("lengthscale {theta} is not positive and finite")));
    }
    if !(x.is_finite() && x2.is_finite()) {
        return Err(Error::InvalidParameter("non-finite kernel argument".into()));
    }
    Ok(psi_raw(kind, x - x2, theta))
}

/// Product correlation over the input coordinates only.
pub fn kernel_input(kind: KernelKind, x: &[f64], x2: &[f64], scales: &LengthscaleVector) -> Result<f64> {
    let d = scales.dim();
    if x.len() != d {
        return Err(Error::Shape { expected: d, got: x.len() });
    }
    if x2.len() != d {
        return Err(Error::Shape { expected: d, got: x2.len() });
    }
    Ok(input_product(kind, x, x2, &scales.input_scales))
}

/// Correlation between augmented inputs `(x, y)` and `(x', y')`.
pub fn kernel_augmented(
    kind: KernelKind,
    z: (&[f64], f64),
    z2: (&[f64], f64),
    scales: &LengthscaleVector,
) -> Result<f64> {
    let theta_y = scales
        .output_scale
        .ok_or_else(|| Error::InvalidParameter("augmented kernel needs an output lengthscale".into()))?;
    let kx = kernel_input(kind, z.0, z2.0, scales)?;
    Ok(kx * psi(kind, z.1, z2.1, theta_y)?)
}

#[inline]
pub(crate) fn input_product(kind: KernelKind, x: &[f64], x2: &[f64], theta: &[f64]) -> f64 {
    x.iter()
        .zip(x2)
        .zip(theta)
        .map(|((a, b), t)| psi_raw(kind, a - b, *t))
        .product()
}

/// Correlation between two points of the arity described by `scales`
/// (augmented points carry the previous-level output in the last slot).
#[inline]
pub(crate) fn correlation(kind: KernelKind, a: &[f64], b: &[f64], theta: &[f64]) -> f64 {
    input_product(kind, a, b, theta)
}

/// Correlation matrix with `jitter` added to the diagonal.
pub fn cov_matrix(kind: KernelKind, points: &[Vec<f64>], scales: &LengthscaleVector, jitter: f64) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(Error::Argument("covariance of an empty point set".into()));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::InvalidParameter(format!("jitter {jitter} must be nonnegative")));
    }
    let arity = scales.arity();
    if let Some(p) = points.iter().find(|p| p.len() != arity) {
        return Err(Error::Shape { expected: arity, got: p.len() });
    }
    let theta = scales.as_vec();
    Ok(correlation_matrix(kind, points, &theta, jitter))
}

pub(crate) fn correlation_matrix(kind: KernelKind, points: &[Vec<f64>], theta: &[f64], jitter: f64) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::<f64>::identity(n, n) * (1.0 + jitter);
    for i in 0..n {
        for j in 0..i {
            let v = correlation(kind, &points[i], &points[j], theta);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factorization with jitter escalation (x10 per retry up to
/// [`MAX_JITTER`]). Returns the factor and the jitter that succeeded.
pub fn factor_with_jitter(
    kind: KernelKind,
    points: &[Vec<f64>],
    theta: &[f64],
    jitter: f64,
) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>, f64)> {
    let mut g = jitter;
    loop {
        let k = correlation_matrix(kind, points, theta, g);
        if let Some(chol) = Cholesky::new(k.clone()) {
            // nalgebra accepts tiny positive pivots; reject factors that are
            // numerically singular.
            let diag = chol.l_dirty().diagonal();
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            if min > 1e-7 * g.max(1e-12).sqrt() {
                return Ok((k, chol, g));
            }
        }
        if g >= MAX_JITTER {
            return Err(Error::Conditioning { jitter: g });
        }
        g = if g <= 0.0 { DEFAULT_JITTER } else { (g * 10.0).min(MAX_JITTER) };
    }
}
