//! The recursive multi-fidelity emulator.
//!
//! Level 1 is an ordinary GP in `x`. Level `l >= 2` is a GP in the augmented
//! input `(x, f_{l-1}(x))`, trained on `(x_i, y_i^{[l-1]})` at the nested rows.
//! Predictions propagate a Gaussian `(mean, var)` for `f_{l-1}(x)` through
//! level `l` in closed form. The result is moment matched back to a Gaussian
//! before moving up a level.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::MultiFidelityDataset;
use crate::error::{Error, Result};
use crate::gp::{fit_level_warm, FitOptions, LevelModel};
use crate::kernels::{input_product, KernelKind, LengthscaleVector};
use crate::moments;
use crate::par::{self, Exec};

/// Inner variances below this fraction of the inner level's scale are
/// treated as exactly zero (the query sits on an inner training point).
const DEGENERATE_VAR: f64 = 1e-12;

/// Default Monte Carlo size for the three-level decomposition.
pub const DEFAULT_DECOMPOSITION_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMoments {
    pub mean: f64,
    pub var: f64,
    pub decomposition: Option<Vec<f64>>,
    /// The query lies outside the bounding box of the level-1 design.
    pub extrapolated: bool,
}

/// Monte Carlo estimate of the posterior mean and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub se_var: f64,
}

/// Variance contributions `V_1..V_L`. Standard errors are zero for terms
/// computed in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Standard error of `sum(values)`.
    pub total_std_error: f64,
}

/// Serializable hyperparameters of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelHyper {
    pub scales: LengthscaleVector,
    pub alpha: f64,
    pub tau_sq: f64,
    pub jitter: f64,
}

/// One recursive step: the moments of `f_l(x)` and the split of its
/// variance into the part inherited from `f_{l-1}` and the part from `W_l`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Step {
    pub mean: f64,
    /// Unclamped total variance.
    pub var: f64,
    /// `Var[E[f_l | f_{l-1}]]`.
    pub outer: f64,
    /// `E[Var[f_l | f_{l-1}]]`.
    pub inner: f64,
}

/// Closed-form moments at level `model.level_index >= 2` given
/// `f_{l-1}(x) ~ N(m, s2)`; `u` is the rescaled input.
pub(crate) fn recursive_step(model: &LevelModel, u: &[f64], m: f64, s2: f64, degenerate: bool) -> Step {
    let d = u.len();
    if degenerate {
        let mut z = u.to_vec();
        z.push(m);
        let (mean, var) = model.moments_raw(&z);
        return Step { mean, var, outer: 0.0, inner: var };
    }
    let kind = model.kernel_kind;
    let theta = model.theta();
    let theta_y = theta[d];
    let design = model.design();
    let r = model.kinv_resid();
    let kinv = model.kinv();
    let n = model.n();
    let c: Vec<f64> = design.iter().map(|row| input_product(kind, u, &row[..d], &theta[..d])).collect();
    let ys: Vec<f64> = design.iter().map(|row| row[d]).collect();

    let mut dev = 0.0;
    let mut outer = 0.0;
    let mut inner = 0.0;
    for i in 0..n {
        if c[i] == 0.0 {
            continue;
        }
        dev += r[i] * c[i] * moments::xi(kind, ys[i], m, s2, theta_y);
        for k in 0..=i {
            if c[k] == 0.0 {
                continue;
            }
            let w = if i == k { 1.0 } else { 2.0 };
            let z = w * c[i] * c[k] * moments::zeta(kind, ys[i], ys[k], m, s2, theta_y);
            outer += r[i] * r[k] * z;
            inner += kinv[(i, k)] * z;
        }
    }
    let outer = outer - dev * dev;
    let inner = model.tau_sq * (1.0 - inner);
    Step { mean: model.alpha + dev, var: outer + inner, outer, inner }
}

/// Moments at levels `1..=upto` for rescaled input `u`.
pub(crate) fn chain(models: &[&LevelModel], u: &[f64], upto: usize) -> Vec<Step> {
    let mut out: Vec<Step> = Vec::with_capacity(upto);
    let (mean, var) = models[0].moments_raw(u);
    out.push(Step { mean, var, outer: 0.0, inner: var });
    for l in 1..upto {
        let prev = out[l - 1];
        let s2 = prev.var.max(0.0);
        let degenerate = s2 <= DEGENERATE_VAR * models[l - 1].tau_sq;
        out.push(recursive_step(models[l], u, prev.mean, s2, degenerate));
    }
    out
}

#[derive(Debug)]
pub struct RnaEmulator {
    dataset: MultiFidelityDataset,
    kind: KernelKind,
    models: Vec<LevelModel>,
    origin: Vec<f64>,
    span: Vec<f64>,
    clamped: AtomicU64,
    /// Monte Carlo size for the three-level decomposition.
    pub decomposition_samples: usize,
    pub decomposition_seed: u64,
}

impl Clone for RnaEmulator {
    fn clone(&self) -> Self {
        RnaEmulator {
            dataset: self.dataset.clone(),
            kind: self.kind,
            models: self.models.clone(),
            origin: self.origin.clone(),
            span: self.span.clone(),
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
            decomposition_samples: self.decomposition_samples,
            decomposition_seed: self.decomposition_seed,
        }
    }
}

fn unit_box(x1: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x1[0].len();
    let mut origin = vec![0.0; d];
    let mut span = vec![1.0; d];
    for j in 0..d {
        let lo = x1.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
        let hi = x1.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        origin[j] = lo;
        if hi > lo {
            span[j] = hi - lo;
        }
    }
    (origin, span)
}

impl RnaEmulator {
    /// Fit every level by maximum likelihood.
    pub fn fit(dataset: &MultiFidelityDataset, kind: KernelKind, options: &FitOptions) -> Result<RnaEmulator> {
        Self::fit_warm(dataset, kind, options, None)
    }

    /// As [`RnaEmulator::fit`], adding the lengthscales of `previous` as
    /// starting points.
    pub fn fit_warm(
        dataset: &MultiFidelityDataset,
        kind: KernelKind,
        options: &FitOptions,
        previous: Option<&RnaEmulator>,
    ) -> Result<RnaEmulator> {
        dataset.validate()?;
        let (origin, span) = unit_box(&dataset.designs[0]);
        let inputs = Self::training_inputs(dataset, &origin, &span);
        let levels: Vec<usize> = (1..=dataset.levels).collect();
        let fits = par::map(options.exec, &levels, |l| {
            let opts = FitOptions { rng_seed: options.rng_seed.wrapping_add(*l as u64), ..options.clone() };
            let warm = previous.and_then(|p| p.models.get(l - 1)).map(|m| m.theta().to_vec());
            fit_level_warm(*l, &inputs[l - 1], &dataset.outputs[l - 1], kind, &opts, warm.as_deref())
        });
        let models = fits.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(dataset.clone(), kind, models, origin, span))
    }

    /// Rebuild from stored hyperparameters; caches are recomputed.
    pub fn from_hyperparameters(
        dataset: &MultiFidelityDataset,
        kind: KernelKind,
        hypers: &[LevelHyper],
    ) -> Result<RnaEmulator> {
        dataset.validate()?;
        if hypers.len() != dataset.levels {
            return Err(Error::Shape { expected: dataset.levels, got: hypers.len() });
        }
        let (origin, span) = unit_box(&dataset.designs[0]);
        let inputs = Self::training_inputs(dataset, &origin, &span);
        let mut models = Vec::with_capacity(hypers.len());
        for (l, h) in hypers.iter().enumerate() {
            let m = LevelModel::assemble(
                l + 1,
                kind,
                h.scales.clone(),
                inputs[l].clone(),
                dataset.outputs[l].clone(),
                h.jitter,
                Some((h.alpha, h.tau_sq)),
            )
            .map_err(|e| Error::Fit { level: l + 1, message: e.to_string() })?;
            models.push(m);
        }
        Ok(Self::from_parts(dataset.clone(), kind, models, origin, span))
    }

    fn from_parts(
        dataset: MultiFidelityDataset,
        kind: KernelKind,
        models: Vec<LevelModel>,
        origin: Vec<f64>,
        span: Vec<f64>,
    ) -> RnaEmulator {
        RnaEmulator {
            dataset,
            kind,
            models,
            origin,
            span,
            clamped: AtomicU64::new(0),
            decomposition_samples: DEFAULT_DECOMPOSITION_SAMPLES,
            decomposition_seed: 0,
        }
    }

    fn training_inputs(ds: &MultiFidelityDataset, origin: &[f64], span: &[f64]) -> Vec<Vec<Vec<f64>>> {
        (0..ds.levels)
            .map(|l| {
                ds.designs[l]
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let mut z: Vec<f64> = x.iter().zip(origin).zip(span).map(|((v, o), s)| (v - o) / s).collect();
                        if l > 0 {
                            z.push(ds.outputs[l - 1][i]);
                        }
                        z
                    })
                    .collect()
            })
            .collect()
    }

    pub fn hyperparameters(&self) -> Vec<LevelHyper> {
        self.models
            .iter()
            .map(|m| LevelHyper { scales: m.scales.clone(), alpha: m.alpha, tau_sq: m.tau_sq, jitter: m.jitter })
            .collect()
    }

    pub fn dataset(&self) -> &MultiFidelityDataset {
        &self.dataset
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn levels(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim
    }

    pub fn level_model(&self, level: usize) -> &LevelModel {
        &self.models[level - 1]
    }

    pub(crate) fn model_refs(&self) -> Vec<&LevelModel> {
        self.models.iter().collect()
    }

    /// Number of predictions whose variance had to be clamped at zero.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Map a physical input into the unit box of the level-1 design.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.origin).zip(&self.span).map(|((v, o), s)| (v - o) / s).collect()
    }

    fn check(&self, x: &[f64], level: usize) -> Result<()> {
        if level == 0 || level > self.levels() {
            return Err(Error::LevelOutOfRange { level, levels: self.levels() });
        }
        if x.len() != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite query point".into()));
        }
        Ok(())
    }

    fn extrapolated(u: &[f64]) -> bool {
        u.iter().any(|v| *v < -1e-9 || *v > 1.0 + 1e-9)
    }

    fn clamp(&self, var: f64) -> f64 {
        if var < 0.0 {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            0.0
        } else {
            var
        }
    }

    /// Posterior mean and variance of `f_level(x)`.
    pub fn predict(&self, x: &[f64], level: usize) -> Result<PosteriorMoments> {
        self.check(x, level)?;
        let u = self.to_unit(x);
        let step = chain(&self.model_refs(), &u, level)[level - 1];
        Ok(PosteriorMoments {
            mean: step.mean,
            var: self.clamp(step.var),
            decomposition: None,
            extrapolated: Self::extrapolated(&u),
        })
    }

    /// `(mean, var)` at every level.
    pub fn predict_levels(&self, x: &[f64]) -> Result<Vec<(f64, f64)>> {
        self.check(x, 1)?;
        let u = self.to_unit(x);
        Ok(chain(&self.model_refs(), &u, self.levels())
            .into_iter()
            .map(|s| (s.mean, self.clamp(s.var)))
            .collect())
    }

    /// Top-level prediction including the variance decomposition.
    pub fn predict_with_decomposition(&self, x: &[f64]) -> Result<PosteriorMoments> {
        let mut p = self.predict(x, self.levels())?;
        let d = self.variance_decomposition(x)?;
        p.decomposition = Some(d.values);
        Ok(p)
    }

    /// Contributions `V_1..V_L` of each level's GP to the top-level variance.
    ///
    /// Two levels: closed form, summing to the predictive variance exactly.
    /// Three levels: `V_1` and `V_2` by Monte Carlo over `f_1(x)` with
    /// antithetic pairs, `V_3` in closed form.
    pub fn variance_decomposition(&self, x: &[f64]) -> Result<Decomposition> {
        let levels = self.levels();
        if !(2..=3).contains(&levels) {
            return Err(Error::UnsupportedLevels(levels));
        }
        self.check(x, levels)?;
        let u = self.to_unit(x);
        let models = self.model_refs();
        let steps = chain(&models, &u, levels);
        let top = steps[levels - 1];
        if levels == 2 {
            let total = top.var.max(0.0);
            let v1 = top.outer.clamp(0.0, total);
            return Ok(Decomposition { values: vec![v1, total - v1], std_errors: vec![0.0; 2], total_std_error: 0.0 });
        }
        let v3 = top.inner.max(0.0);
        let (v1, v2, se1, se2, se_total) = self.three_level_mc(&u, &steps);
        Ok(Decomposition {
            values: vec![v1, v2, v3],
            std_errors: vec![se1, se2, 0.0],
            total_std_error: se_total,
        })
    }

    fn three_level_mc(&self, u: &[f64], steps: &[Step]) -> (f64, f64, f64, f64, f64) {
        let (m1, s1) = (steps[0].mean, steps[0].var.max(0.0).sqrt());
        if s1 <= (DEGENERATE_VAR * self.models[0].tau_sq).sqrt() {
            // f_1 is known, so its GP contributes nothing and the
            // remaining outer variance belongs to level 2.
            let top = steps[2];
            return (0.0, top.outer.max(0.0), 0.0, 0.0, 0.0);
        }
        let pairs = (self.decomposition_samples / 2).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.decomposition_seed);
        let m2 = &self.models[1];
        let m3 = &self.models[2];
        let eval = |f1: f64| {
            let mut z = u.to_vec();
            z.push(f1);
            let (mu2, var2) = m2.moments_raw(&z);
            let var2 = var2.max(0.0);
            let degenerate = var2 <= DEGENERATE_VAR * m2.tau_sq;
            let s = recursive_step(m3, u, mu2, var2, degenerate);
            let j = s.mean - m3.alpha;
            // E[(E[f3 | f2] - alpha)^2 | f1] = outer + j^2.
            let b = s.outer + j * j;
            (j, b)
        };
        let mut js = Vec::with_capacity(2 * pairs);
        let mut bs = Vec::with_capacity(2 * pairs);
        for _ in 0..pairs {
            let z: f64 = StandardNormal.sample(&mut rng);
            for f1 in [m1 + s1 * z, m1 - s1 * z] {
                let (j, b) = eval(f1);
                js.push(j);
                bs.push(b);
            }
        }
        let n = js.len() as f64;
        let jbar = js.iter().sum::<f64>() / n;
        // Per-pair averages are independent, which gives honest standard errors.
        let pair_stats = |g: &dyn Fn(usize) -> f64| {
            let vals: Vec<f64> = (0..pairs).map(|p| 0.5 * (g(2 * p) + g(2 * p + 1))).collect();
            let mean = vals.iter().sum::<f64>() / pairs as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (pairs as f64 - 1.0).max(1.0);
            (mean, (var / pairs as f64).sqrt())
        };
        let (v1, se1) = pair_stats(&|i| (js[i] - jbar).powi(2));
        let (v2, se2) = pair_stats(&|i| bs[i] - js[i] * js[i]);
        let (_, se_total) = pair_stats(&|i| (js[i] - jbar).powi(2) + bs[i] - js[i] * js[i]);
        (v1.max(0.0), v2.max(0.0), se1, se2, se_total)
    }

    /// Sequential Monte Carlo estimate of the posterior of `f_level(x)`:
    /// `f_1 ~ N(mu_1, s_1^2)`, then `f_l ~ N(mu_l(x, f_{l-1}), s_l^2(x, f_{l-1}))`.
    ///
    /// Draws are generated in fixed-size chunks, each with its own stream of
    /// the seeded generator, so the result does not depend on the thread count.
    pub fn mc_posterior_oracle(
        &self,
        x: &[f64],
        level: usize,
        n_samples: usize,
        seed: u64,
        exec: Exec,
    ) -> Result<McEstimate> {
        self.check(x, level)?;
        if n_samples < 2 {
            return Err(Error::Argument("at least two samples are required".into()));
        }
        const CHUNK: usize = 8192;
        let u = self.to_unit(x);
        let chunks = n_samples.div_ceil(CHUNK);
        let samples: Vec<Vec<f64>> = par::map_range(exec, chunks, |c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(n_samples - c * CHUNK);
            let mut z = u.clone();
            z.push(0.0);
            let (m1, v1) = self.models[0].moments_raw(&u);
            let s1 = v1.max(0.0).sqrt();
            (0..len)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let mut f = m1 + s1 * e;
                    for model in &self.models[1..level] {
                        z[u.len()] = f;
                        let (m, v) = model.moments_raw(&z);
                        let e: f64 = StandardNormal.sample(&mut rng);
                        f = m + v.max(0.0).sqrt() * e;
                    }
                    f
                })
                .collect()
        });
        let all: Vec<f64> = samples.into_iter().flatten().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let (mut m2, mut m4) = (0.0, 0.0);
        for v in &all {
            let d2 = (v - mean).powi(2);
            m2 += d2;
            m4 += d2 * d2;
        }
        m2 /= n;
        m4 /= n;
        let var = m2 * n / (n - 1.0);
        Ok(McEstimate {
            mean,
            var,
            se_mean: (var / n).sqrt(),
            se_var: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        })
    }

    /// Attenuation of the level-`level` posterior mean caused by uncertainty
    /// in `f_{level-1}(x)`: `E[psi(f, mu)]` for `f ~ N(mu, var_{level-1}(x))`.
    /// For the squared exponential this is `sqrt(theta_y / (theta_y + 2 var))`;
    /// for the Matérn kernels it is the analogous heuristic.
    pub fn scaling_factor(&self, x: &[f64], level: usize) -> Result<f64> {
        self.check(x, level)?;
        if level < 2 {
            return Err(Error::Argument("the scaling factor is defined for levels >= 2".into()));
        }
        let u = self.to_unit(x);
        let steps = chain(&self.model_refs(), &u, level - 1);
        let s2 = steps[level - 2].var.max(0.0);
        let s2 = if s2 <= DEGENERATE_VAR * self.models[level - 2].tau_sq { 0.0 } else { s2 };
        let theta_y = self.models[level - 1].theta()[self.dim()];
        Ok(moments::attenuation(self.kind, s2, theta_y))
    }
}
