//! Cost-aware active learning over fidelity levels.
//!
//! Each strategy scores a pair `(level, x)` by some measure of uncertainty
//! removed, divided by the cost of running every simulator up to that level
//! (nesting forces the lower levels to be run as well).

use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::MultiFidelityDataset;
use crate::emulator::{chain, RnaEmulator};
use crate::error::{Error, Result};
use crate::gp::{FitOptions, LevelModel};
use crate::kernels::KernelKind;
use crate::metrics;
use crate::optim::{self, BfgsOptions};
use crate::par::{self, Exec};

/// Candidates closer than this (max-norm, unit box) to an existing point of
/// the same level are duplicates.
pub const DUPLICATE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Variance contribution of the level's own GP per unit cost.
    Ald,
    /// Posterior variance at the level per unit cost.
    Alm,
    /// Average reduction of top-level variance per unit cost.
    Alc,
    /// Location by maximum top-level variance, level by ALC.
    Almc,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Ald, Strategy::Alm, Strategy::Alc, Strategy::Almc];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ald => "ald",
            Strategy::Alm => "alm",
            Strategy::Alc => "alc",
            Strategy::Almc => "almc",
        }
    }

    /// Whether the strategy scores candidates with imputed future outputs.
    pub fn imputes(self) -> bool {
        matches!(self, Strategy::Alc | Strategy::Almc)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown strategy '{s}' (expected ald, alm, alc or almc)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    per_level: Vec<f64>,
}

impl CostModel {
    pub fn new(per_level: Vec<f64>) -> Result<Self> {
        if per_level.is_empty() {
            return Err(Error::Argument("at least one level cost is required".into()));
        }
        if per_level.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::Argument(format!("costs {per_level:?} must be positive")));
        }
        if per_level.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument(format!("costs {per_level:?} must be strictly increasing")));
        }
        Ok(CostModel { per_level })
    }

    pub fn levels(&self) -> usize {
        self.per_level.len()
    }

    pub fn per_level(&self) -> &[f64] {
        &self.per_level
    }

    /// `C_1 + ... + C_level`, the price of one acquisition at `level`.
    pub fn cumulative(&self, level: usize) -> f64 {
        self.per_level[..level].iter().sum()
    }
}

fn check_level(em: &RnaEmulator, costs: &CostModel, level: usize) -> Result<()> {
    if costs.levels() != em.levels() {
        return Err(Error::Shape { expected: em.levels(), got: costs.levels() });
    }
    if level == 0 || level > em.levels() {
        return Err(Error::LevelOutOfRange { level, levels: em.levels() });
    }
    Ok(())
}

/// True when unit-box point `u` repeats an input of `level`.
fn is_duplicate(em: &RnaEmulator, u: &[f64], level: usize) -> bool {
    let d = u.len();
    em.level_model(level)
        .design()
        .iter()
        .any(|row| row[..d].iter().zip(u).all(|(a, b)| (a - b).abs() <= DUPLICATE_TOL))
}

/// `V_level(x) / cumulative(level)`.
pub fn ald_criterion(em: &RnaEmulator, x: &[f64], level: usize, costs: &CostModel) -> Result<f64> {
    check_level(em, costs, level)?;
    if is_duplicate(em, &em.to_unit(x), level) {
        return Ok(0.0);
    }
    let v = if em.levels() == 1 {
        em.predict(x, 1)?.var
    } else {
        em.variance_decomposition(x)?.values[level - 1]
    };
    Ok(v.max(0.0) / costs.cumulative(level))
}

/// `sigma^2_level(x) / cumulative(level)`.
pub fn alm_criterion(em: &RnaEmulator, x: &[f64], level: usize, costs: &CostModel) -> Result<f64> {
    check_level(em, costs, level)?;
    if is_duplicate(em, &em.to_unit(x), level) {
        return Ok(0.0);
    }
    Ok(em.predict(x, level)?.var / costs.cumulative(level))
}

/// `Delta sigma^2_L(level, x) / cumulative(level)` with a freshly drawn
/// imputation set. Use [`AlcContext`] to score many candidates against
/// the same random numbers.
pub fn alc_criterion(
    em: &RnaEmulator,
    x: &[f64],
    level: usize,
    costs: &CostModel,
    integration_points: &[Vec<f64>],
    n_imputations: usize,
    seed: u64,
) -> Result<f64> {
    check_level(em, costs, level)?;
    let ctx = AlcContext::new(em, integration_points, n_imputations, seed, Exec::Sequential)?;
    Ok(ctx.reduction(x, level)? / costs.cumulative(level))
}

/// Uniform sample of `n` points in `bounds`.
pub fn uniform_points(bounds: &[(f64, f64)], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| bounds.iter().map(|(lo, hi)| rng.random_range(*lo..=*hi)).collect())
        .collect()
}

/// Shared state for scoring ALC candidates: integration points and the
/// standard normal draws behind every imputation.
pub struct AlcContext<'a> {
    em: &'a RnaEmulator,
    points: Vec<Vec<f64>>,
    base: f64,
    normals: Vec<Vec<f64>>,
    exec: Exec,
}

impl<'a> AlcContext<'a> {
    pub fn new(
        em: &'a RnaEmulator,
        integration_points: &[Vec<f64>],
        n_imputations: usize,
        seed: u64,
        exec: Exec,
    ) -> Result<Self> {
        if integration_points.is_empty() {
            return Err(Error::Argument("the ALC integration sample is empty".into()));
        }
        if n_imputations == 0 {
            return Err(Error::Argument("ALC needs at least one imputation".into()));
        }
        if let Some(p) = integration_points.iter().find(|p| p.len() != em.dim()) {
            return Err(Error::Shape { expected: em.dim(), got: p.len() });
        }
        let points: Vec<Vec<f64>> = integration_points.iter().map(|p| em.to_unit(p)).collect();
        let models = em.model_refs();
        let top = em.levels();
        let vars = par::map(exec, &points, |u| chain(&models, u, top)[top - 1].var.max(0.0));
        let base = vars.iter().sum::<f64>() / vars.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normals = (0..n_imputations)
            .map(|_| (0..top).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Ok(AlcContext { em, points, base, normals, exec })
    }

    /// Mean top-level variance over the integration points.
    pub fn current_average_variance(&self) -> f64 {
        self.base
    }

    /// Expected drop in average top-level variance from running levels
    /// `1..=level` at `x`, clamped at zero.
    pub fn reduction(&self, x: &[f64], level: usize) -> Result<f64> {
        let em = self.em;
        if level == 0 || level > em.levels() {
            return Err(Error::LevelOutOfRange { level, levels: em.levels() });
        }
        if x.len() != em.dim() {
            return Err(Error::Shape { expected: em.dim(), got: x.len() });
        }
        let u = em.to_unit(x);
        if is_duplicate(em, &u, level) {
            return Ok(0.0);
        }
        let models = em.model_refs();
        let top = em.levels();
        let after = par::map(self.exec, &self.normals, |draws| {
            // Outputs are imputed level by level, each from the current
            // posterior given the previous level's imputed value.
            let mut updated: Vec<Option<LevelModel>> = Vec::with_capacity(level);
            let mut prev = 0.0;
            for s in 0..level {
                let mut z = u.clone();
                if s > 0 {
                    z.push(prev);
                }
                let (m, v) = models[s].moments_raw(&z);
                let y = m + v.max(0.0).sqrt() * draws[s];
                // A point already present at a lower level adds nothing there.
                updated.push(models[s].with_appended_point(&z, y).ok());
                prev = y;
            }
            let refs: Vec<&LevelModel> = (0..top)
                .map(|s| match updated.get(s) {
                    Some(Some(m)) => m,
                    _ => models[s],
                })
                .collect();
            self.points.iter().map(|p| chain(&refs, p, top)[top - 1].var.max(0.0)).sum::<f64>() / self.points.len() as f64
        });
        let mean_after = after.iter().sum::<f64>() / after.len() as f64;
        Ok((self.base - mean_after).max(0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    /// Number of random and perturbed-design starting candidates; `None`
    /// means `10 d`.
    pub starts: Option<usize>,
    /// How many of the best candidates get a local quasi-Newton ascent.
    pub refine: usize,
    /// Points per axis of the coarse grid, used when `d <= 2`.
    pub grid_per_dim: usize,
    pub max_iters: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions { starts: None, refine: 3, grid_per_dim: 21, max_iters: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlcOptions {
    pub integration_points: usize,
    pub imputations: usize,
}

impl Default for AlcOptions {
    fn default() -> Self {
        AlcOptions { integration_points: 1000, imputations: 100 }
    }
}

/// Maximize `criterion` over the box. Returns the best point found and its
/// value. Candidates are random points, perturbed copies of `anchors` and,
/// for `d <= 2`, a grid; the best few are polished by a local ascent.
pub fn optimize_acquisition<F>(
    criterion: F,
    bounds: &[(f64, f64)],
    anchors: &[Vec<f64>],
    opts: &OptimizerOptions,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = bounds.len();
    if d == 0 || bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
        return Err(Error::Argument("acquisition box must be bounded".into()));
    }
    let to_box = |u: &[f64]| -> Vec<f64> { u.iter().zip(bounds).map(|(v, (lo, hi))| lo + v * (hi - lo)).collect() };
    let to_unit = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(bounds)
            .map(|(v, (lo, hi))| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    };
    let f = |u: &[f64]| {
        let v = criterion(&to_box(u));
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_starts = opts.starts.unwrap_or(10 * d).max(1);
    let mut cands: Vec<Vec<f64>> = Vec::new();
    for i in 0..n_starts {
        if !anchors.is_empty() && i % 2 == 1 {
            let a = to_unit(&anchors[rng.random_range(0..anchors.len())]);
            cands.push(
                a.iter()
                    .map(|v| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        (v + 0.05 * e).clamp(0.0, 1.0)
                    })
                    .collect(),
            );
        } else {
            cands.push((0..d).map(|_| rng.random::<f64>()).collect());
        }
    }
    if d <= 2 && opts.grid_per_dim >= 2 {
        let g = opts.grid_per_dim;
        let total = g.pow(d as u32);
        for k in 0..total {
            let mut idx = k;
            cands.push(
                (0..d)
                    .map(|_| {
                        let v = (idx % g) as f64 / (g - 1) as f64;
                        idx /= g;
                        v
                    })
                    .collect(),
            );
        }
    }
    let values = par::map(exec, &cands, |u| f(u));
    let mut order: Vec<usize> = (0..cands.len()).filter(|i| values[*i].is_finite()).collect();
    order.sort_by(|a, b| values[*b].total_cmp(&values[*a]).then(a.cmp(b)));
    if order.is_empty() {
        return Err(Error::Argument("acquisition criterion is not finite anywhere in the box".into()));
    }
    let scale = values[order[0]].abs().max(f64::MIN_POSITIVE);
    let lo = vec![0.0; d];
    let hi = vec![1.0; d];
    let bfgs = BfgsOptions { max_iters: opts.max_iters, grad_tol: 1e-8 };
    let starts: Vec<usize> = order.iter().take(opts.refine).copied().collect();
    let polished = par::map(exec, &starts, |i| {
        let obj = |u: &[f64]| {
            let mut neg = |q: &[f64]| -f(q) / scale;
            let v = neg(u);
            let g = optim::fd_gradient(&mut neg, u, &lo, &hi);
            (v, g)
        };
        optim::minimize_box(obj, &cands[*i], &lo, &hi, &bfgs)
    });
    let mut best_u = cands[order[0]].clone();
    let mut best_v = values[order[0]];
    for m in polished {
        if m.value.is_finite() {
            // Re-evaluate rather than unscale, so the reported value is exact.
            let v = f(&m.x);
            if v > best_v {
                best_v = v;
                best_u = m.x;
            }
        }
    }
    Ok((to_box(&best_u), best_v))
}

/// Best value and maximizer of one level's criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCurve {
    pub level: usize,
    pub best_value: f64,
    pub argmax: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionResult {
    pub strategy: Strategy,
    pub level: usize,
    pub location: Vec<f64>,
    pub criterion_value: f64,
    pub per_level_curves: Vec<LevelCurve>,
    /// For ALMC, the top-level variance at the chosen location.
    pub stage_one_value: Option<f64>,
    pub cost_charged: f64,
}

/// Options shared by the selection step and the loop.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlOptions {
    pub fit: FitOptions,
    pub optimizer: OptimizerOptions,
    pub alc: AlcOptions,
    pub seed: u64,
    pub exec: Exec,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.next_u64()
}

fn pick(curves: &[LevelCurve], allowed: &[usize]) -> Option<usize> {
    let mut best: Option<&LevelCurve> = None;
    for c in curves.iter().filter(|c| allowed.contains(&c.level)) {
        // Ties go to the cheaper level.
        if best.is_none_or(|b| c.best_value > b.best_value) {
            best = Some(c);
        }
    }
    best.map(|c| c.level)
}

/// Choose the next `(level, x)` among the `allowed` levels.
pub fn select(
    em: &RnaEmulator,
    strategy: Strategy,
    costs: &CostModel,
    allowed: &[usize],
    opts: &AlOptions,
    seed: u64,
) -> Result<AcquisitionResult> {
    check_level(em, costs, 1)?;
    if allowed.is_empty() {
        return Err(Error::Argument("no level is allowed".into()));
    }
    if let Some(l) = allowed.iter().find(|l| **l == 0 || **l > em.levels()) {
        return Err(Error::LevelOutOfRange { level: *l, levels: em.levels() });
    }
    let bounds = &em.dataset().bounds;
    let anchors = &em.dataset().designs[0];
    let exec = opts.exec;
    let alc_ctx = if strategy.imputes() {
        let pts = uniform_points(bounds, opts.alc.integration_points, step_seed(seed, 1));
        Some(AlcContext::new(em, &pts, opts.alc.imputations, step_seed(seed, 2), exec)?)
    } else {
        None
    };
    let guarded = |l: usize, x: &[f64], value: Result<f64>| {
        if is_duplicate(em, &em.to_unit(x), l) {
            f64::NEG_INFINITY
        } else {
            value.unwrap_or(f64::NEG_INFINITY)
        }
    };

    let mut stage_one_value = None;
    let mut curves = Vec::new();
    if strategy == Strategy::Almc {
        let top = em.levels();
        let (x, v) = optimize_acquisition(
            |x| em.predict(x, top).map(|p| p.var).unwrap_or(f64::NEG_INFINITY),
            bounds,
            anchors,
            &opts.optimizer,
            step_seed(seed, 3),
            exec,
        )?;
        stage_one_value = Some(v);
        let ctx = alc_ctx.as_ref().expect("context built for imputing strategies");
        for (l, value) in (1..=em.levels()).zip(almc_scores(em, ctx, &x, costs)?) {
            curves.push(LevelCurve { level: l, best_value: value, argmax: x.clone() });
        }
    } else {
        for l in 1..=em.levels() {
            let seed_l = step_seed(seed, 10 + l as u64);
            let (x, v) = match strategy {
                Strategy::Ald => optimize_acquisition(
                    |x| guarded(l, x, ald_criterion(em, x, l, costs)),
                    bounds,
                    anchors,
                    &opts.optimizer,
                    seed_l,
                    exec,
                )?,
                Strategy::Alm => optimize_acquisition(
                    |x| guarded(l, x, alm_criterion(em, x, l, costs)),
                    bounds,
                    anchors,
                    &opts.optimizer,
                    seed_l,
                    exec,
                )?,
                _ => {
                    let ctx = alc_ctx.as_ref().expect("context built for imputing strategies");
                    // The inner imputation loop runs sequentially here;
                    // candidates are already spread across threads.
                    optimize_acquisition(
                        |x| guarded(l, x, ctx.reduction(x, l).map(|r| r / costs.cumulative(l))),
                        bounds,
                        anchors,
                        &opts.optimizer,
                        seed_l,
                        exec,
                    )?
                }
            };
            curves.push(LevelCurve { level: l, best_value: v, argmax: x });
        }
    }
    let level = pick(&curves, allowed).expect("allowed is non-empty");
    let chosen = &curves[level - 1];
    if chosen.best_value == f64::NEG_INFINITY {
        return Err(Error::Dataset(format!(
            "every allowed level already holds the best candidate {:?}",
            chosen.argmax
        )));
    }
    Ok(AcquisitionResult {
        strategy,
        level,
        location: chosen.argmax.clone(),
        criterion_value: chosen.best_value,
        per_level_curves: curves.clone(),
        stage_one_value,
        cost_charged: costs.cumulative(level),
    })
}

/// Cost-normalised ALC reduction at a fixed `x` for every level. A level
/// that already holds `x` scores `-inf`: late in a run the reductions can
/// all clamp to zero, and the tie must not go to a level that cannot grow.
fn almc_scores(em: &RnaEmulator, ctx: &AlcContext, x: &[f64], costs: &CostModel) -> Result<Vec<f64>> {
    let u = em.to_unit(x);
    (1..=em.levels())
        .map(|l| {
            if is_duplicate(em, &u, l) {
                Ok(f64::NEG_INFINITY)
            } else {
                Ok(ctx.reduction(x, l)? / costs.cumulative(l))
            }
        })
        .collect()
}

/// ALMC selection over all levels.
pub fn almc_select(em: &RnaEmulator, costs: &CostModel, opts: &AlOptions, seed: u64) -> Result<AcquisitionResult> {
    let all: Vec<usize> = (1..=em.levels()).collect();
    select(em, Strategy::Almc, costs, &all, opts, seed)
}

/// A source of simulator outputs.
pub trait Simulator {
    fn simulate(&mut self, level: usize, x: &[f64]) -> Result<f64>;
}

impl<F: FnMut(usize, &[f64]) -> Result<f64>> Simulator for F {
    fn simulate(&mut self, level: usize, x: &[f64]) -> Result<f64> {
        self(level, x)
    }
}

/// Held-out points with true top-level outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub points: Vec<Vec<f64>>,
    pub truths: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub crps: f64,
}

/// RMSE and CRPS of the top-level predictions on `test`.
pub fn evaluate(em: &RnaEmulator, test: &TestSet, exec: Exec) -> Result<Metrics> {
    let top = em.levels();
    let preds = par::map(exec, &test.points, |x| em.predict(x, top));
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    Ok(Metrics { rmse: metrics::rmse(&means, &test.truths)?, crps: metrics::crps(&preds, &test.truths)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlRecord {
    pub step: usize,
    pub strategy: Strategy,
    pub level: usize,
    pub location: Vec<f64>,
    pub imputed: bool,
    /// Simulated outputs at levels `1..=level`.
    pub outputs: Vec<f64>,
    pub criterion_value: f64,
    pub accrued_cost: f64,
    pub rmse: Option<f64>,
    pub crps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlTrace {
    pub strategy: Strategy,
    pub budget: f64,
    pub initial: Option<Metrics>,
    pub records: Vec<AlRecord>,
}

impl AlTrace {
    pub fn accrued_cost(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.accrued_cost)
    }
}

/// Result of [`al_loop`]. When `error` is set the loop stopped early; the
/// trace, dataset and emulator are valid up to the last completed step.
#[derive(Debug)]
pub struct AlOutcome {
    pub trace: AlTrace,
    pub dataset: MultiFidelityDataset,
    pub emulator: RnaEmulator,
    pub error: Option<Error>,
}

/// Acquire points until no level fits in the remaining budget.
///
/// The budget covers new acquisitions only. When the strategy prefers a
/// level that no longer fits, the choice is remade among affordable levels.
#[allow(clippy::too_many_arguments)]
pub fn al_loop(
    simulator: &mut dyn Simulator,
    initial: MultiFidelityDataset,
    strategy: Strategy,
    costs: &CostModel,
    budget: f64,
    kind: KernelKind,
    opts: &AlOptions,
    test: Option<&TestSet>,
) -> Result<AlOutcome> {
    if !(budget.is_finite() && budget >= 0.0) {
        return Err(Error::Argument(format!("budget {budget} must be a nonnegative number")));
    }
    if costs.levels() != initial.levels {
        return Err(Error::Shape { expected: initial.levels, got: costs.levels() });
    }
    let mut dataset = initial;
    let mut emulator = RnaEmulator::fit(&dataset, kind, &opts.fit)?;
    let initial_metrics = test.map(|t| evaluate(&emulator, t, opts.exec)).transpose()?;
    let mut trace = AlTrace { strategy, budget, initial: initial_metrics, records: Vec::new() };
    let mut accrued = 0.0;
    let slack = 1e-12 * budget.max(1.0);

    for step in 1usize.. {
        let affordable: Vec<usize> =
            (1..=costs.levels()).filter(|l| accrued + costs.cumulative(*l) <= budget + slack).collect();
        if affordable.is_empty() {
            break;
        }
        let result = (|| -> Result<(AcquisitionResult, Vec<f64>, RnaEmulator, MultiFidelityDataset)> {
            let choice = select(&emulator, strategy, costs, &affordable, opts, step_seed(opts.seed, step as u64))?;
            let mut outputs = Vec::with_capacity(choice.level);
            for l in 1..=choice.level {
                let y = simulator.simulate(l, &choice.location)?;
                if !y.is_finite() {
                    return Err(Error::Simulator(format!("level {l} returned a non-finite output {y}")));
                }
                outputs.push(y);
            }
            let mut next = dataset.clone();
            next.insert_nested(&choice.location, &outputs)?;
            next.validate()?;
            let fit = FitOptions { rng_seed: opts.fit.rng_seed.wrapping_add(step as u64), ..opts.fit.clone() };
            let refit = RnaEmulator::fit_warm(&next, kind, &fit, Some(&emulator))?;
            Ok((choice, outputs, refit, next))
        })();
        let (choice, outputs, refit, next) = match result {
            Ok(r) => r,
            Err(e) => {
                return Ok(AlOutcome { trace, dataset, emulator, error: Some(e) });
            }
        };
        accrued += choice.cost_charged;
        dataset = next;
        emulator = refit;
        let m = match test.map(|t| evaluate(&emulator, t, opts.exec)).transpose() {
            Ok(m) => m,
            Err(e) => return Ok(AlOutcome { trace, dataset, emulator, error: Some(e) }),
        };
        trace.records.push(AlRecord {
            step,
            strategy,
            level: choice.level,
            location: choice.location,
            imputed: strategy.imputes(),
            outputs,
            criterion_value: choice.criterion_value,
            accrued_cost: accrued,
            rmse: m.map(|m| m.rmse),
            crps: m.map(|m| m.crps),
        });
    }
    Ok(AlOutcome { trace, dataset, emulator, error: None })
}
