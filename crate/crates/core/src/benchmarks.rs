//! Synthetic multi-fidelity test problems and the repetition harness.

use std::f64::consts::PI;
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::active_learning::{self, al_loop, AlOptions, CostModel, Strategy, TestSet};
use crate::dataset::MultiFidelityDataset;
use crate::design::nested_design;
use crate::emulator::RnaEmulator;
use crate::error::{Error, Result};
use crate::gp::FitOptions;
use crate::kernels::KernelKind;
use crate::par::{self, Exec};

pub use crate::metrics::{crps, crps_gaussian, rmse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    #[default]
    Perdikaris,
    Park,
    Branin,
    Borehole,
    Currin,
    Franke,
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Problem::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown problem '{s}'")))
    }
}

fn perdikaris(level: usize, x: &[f64]) -> f64 {
    let f1 = (8.0 * PI * x[0]).sin();
    if level == 1 {
        f1
    } else {
        (x[0] - 2f64.sqrt()) * f1 * f1
    }
}

fn park(level: usize, x: &[f64]) -> f64 {
    let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
    // x1/2 (sqrt(1 + a/x1^2) - 1) rewritten to stay finite at x1 = 0.
    let a = (x2 + x3 * x3) * x4;
    let f2 = 0.5 * ((x1 * x1 + a).sqrt() - x1) + (x1 + 3.0 * x4) * (1.0 + x3.sin()).exp();
    if level == 2 {
        f2
    } else {
        f2 + x1.sin() / 10.0 * f2 - 2.0 * x1 + x2 * x2 + x3 * x3 + 0.5
    }
}

fn branin3(x1: f64, x2: f64) -> f64 {
    let q = -1.275 * x1 * x1 / (PI * PI) + 5.0 * x1 / PI + x2 - 6.0;
    q * q + (10.0 - 5.0 / (4.0 * PI)) * x1.cos() + 10.0
}

fn branin2(x1: f64, x2: f64) -> Result<f64> {
    let f3 = branin3(x1, x2);
    if f3 < 0.0 {
        return Err(Error::Domain(format!("branin level 2 needs sqrt of {f3} at ({x1}, {x2})")));
    }
    Ok(10.0 * f3.sqrt() + 2.0 * (x1 - 0.5) - 3.0 * (3.0 * x2 - 1.0) - 1.0)
}

fn branin(level: usize, x: &[f64]) -> Result<f64> {
    match level {
        3 => Ok(branin3(x[0], x[1])),
        2 => branin2(x[0], x[1]),
        _ => Ok(branin2(1.2 * (x[0] + 2.0), 1.2 * (x[1] + 2.0))? - 3.0 * x[1] + 1.0),
    }
}

fn borehole(level: usize, x: &[f64]) -> f64 {
    let (rw, r, tu, hu, tl, hl, l, kw) = (x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7]);
    let lr = (r / rw).ln();
    let t = 2.0 * l * tu / (lr * rw * rw * kw) + tu / tl;
    if level == 2 {
        5.0 * tu * (hu - hl) / (lr * (1.5 + t))
    } else {
        2.0 * PI * tu * (hu - hl) / (lr * (1.0 + t))
    }
}

fn currin2(x1: f64, x2: f64) -> f64 {
    let num = 2300.0 * x1.powi(3) + 1900.0 * x1 * x1 + 2092.0 * x1 + 60.0;
    let den = 100.0 * x1.powi(3) + 500.0 * x1 * x1 + 4.0 * x1 + 20.0;
    (1.0 - (-1.0 / (2.0 * x2)).exp()) * num / den
}

fn currin(level: usize, x: &[f64]) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    if level == 2 {
        return currin2(x1, x2);
    }
    let lo = (x2 - 0.05).max(0.0);
    0.25 * (currin2(x1 + 0.05, x2 + 0.05) + currin2(x1 + 0.05, lo))
        + 0.25 * (currin2(x1 - 0.05, x2 + 0.05) + currin2(x1 - 0.05, lo))
}

fn franke(level: usize, x: &[f64]) -> f64 {
    let (a, b) = (9.0 * x[0], 9.0 * x[1]);
    let f1 = 0.75 * (-(a - 2.0).powi(2) / 4.0 - (b - 2.0).powi(2) / 4.0).exp()
        + 0.75 * (-(a + 1.0).powi(2) / 49.0 - (b + 1.0) / 10.0).exp()
        + 0.5 * (-(a - 7.0).powi(2) / 4.0 - (b - 3.0).powi(2) / 4.0).exp()
        - 0.2 * (-(a - 4.0).powi(2) - (b - 7.0).powi(2)).exp();
    if level == 1 {
        return f1;
    }
    let f2 = (-1.4 * f1).exp() * (3.5 * PI * f1).cos();
    if level == 2 {
        return f2;
    }
    (2.0 * PI * (f2 - 1.0)).sin()
}

impl Problem {
    pub const ALL: [Problem; 6] =
        [Problem::Perdikaris, Problem::Park, Problem::Branin, Problem::Borehole, Problem::Currin, Problem::Franke];

    pub fn name(self) -> &'static str {
        match self {
            Problem::Perdikaris => "perdikaris",
            Problem::Park => "park",
            Problem::Branin => "branin",
            Problem::Borehole => "borehole",
            Problem::Currin => "currin",
            Problem::Franke => "franke",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Problem::Perdikaris => 1,
            Problem::Park => 4,
            Problem::Borehole => 8,
            Problem::Branin | Problem::Currin | Problem::Franke => 2,
        }
    }

    pub fn levels(self) -> usize {
        match self {
            Problem::Branin | Problem::Franke => 3,
            _ => 2,
        }
    }

    pub fn bounds(self) -> Vec<(f64, f64)> {
        match self {
            Problem::Branin => vec![(-5.0, 10.0), (0.0, 15.0)],
            Problem::Borehole => vec![
                (0.05, 0.15),
                (100.0, 50_000.0),
                (63_070.0, 115_600.0),
                (990.0, 1110.0),
                (63.1, 116.0),
                (700.0, 820.0),
                (1120.0, 1680.0),
                (9855.0, 12_045.0),
            ],
            p => vec![(0.0, 1.0); p.dim()],
        }
    }

    /// Initial design sizes `n_1 >= ... >= n_L`.
    pub fn default_sizes(self) -> Vec<usize> {
        match self {
            Problem::Perdikaris => vec![13, 8],
            Problem::Branin => vec![20, 15, 10],
            Problem::Park => vec![40, 20],
            Problem::Borehole => vec![60, 30],
            Problem::Currin => vec![20, 10],
            Problem::Franke => vec![20, 15, 10],
        }
    }

    /// `(1, 3)` for two levels, `(1, 3, 9)` for three.
    pub fn default_costs(self) -> Vec<f64> {
        [1.0, 3.0, 9.0][..self.levels()].to_vec()
    }

    /// Output of simulator `level` (1 = lowest fidelity) at `x`.
    pub fn evaluate(self, level: usize, x: &[f64]) -> Result<f64> {
        if level == 0 || level > self.levels() {
            return Err(Error::LevelOutOfRange { level, levels: self.levels() });
        }
        if x.len() != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: x.len() });
        }
        for (j, (v, (lo, hi))) in x.iter().zip(self.bounds()).enumerate() {
            let tol = 1e-12 * (hi - lo);
            if !(v.is_finite() && *v >= lo - tol && *v <= hi + tol) {
                return Err(Error::Domain(format!("{} coordinate {j} = {v} is outside [{lo}, {hi}]", self.name())));
            }
        }
        let y = match self {
            Problem::Perdikaris => perdikaris(level, x),
            Problem::Park => park(level, x),
            Problem::Branin => branin(level, x)?,
            Problem::Borehole => borehole(level, x),
            Problem::Currin => currin(level, x),
            Problem::Franke => franke(level, x),
        };
        if !y.is_finite() {
            return Err(Error::Domain(format!("{} level {level} is undefined at {x:?}", self.name())));
        }
        Ok(y)
    }

    /// Dataset on a seeded nested maximin design of the given sizes.
    pub fn dataset(self, sizes: &[usize], costs: &[f64], seed: u64, maximin_candidates: usize) -> Result<MultiFidelityDataset> {
        if sizes.len() != self.levels() {
            return Err(Error::Shape { expected: self.levels(), got: sizes.len() });
        }
        let nd = nested_design(sizes, self.dim(), seed, maximin_candidates)?;
        self.dataset_from_designs(nd.scaled(&self.bounds()), costs)
    }

    pub fn dataset_from_designs(self, designs: Vec<Vec<Vec<f64>>>, costs: &[f64]) -> Result<MultiFidelityDataset> {
        let outputs = designs
            .iter()
            .enumerate()
            .map(|(l, x)| x.iter().map(|p| self.evaluate(l + 1, p)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        MultiFidelityDataset::new(self.bounds(), costs.to_vec(), designs, outputs)
    }

    /// Uniform test inputs with top-level truths.
    pub fn test_set(self, n: usize, seed: u64) -> Result<TestSet> {
        let points = active_learning::uniform_points(&self.bounds(), n, seed);
        let truths = points.iter().map(|p| self.evaluate(self.levels(), p)).collect::<Result<Vec<_>>>()?;
        Ok(TestSet { points, truths })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Emulation,
    Al,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub kernel: KernelKind,
    /// Defaults to the problem's standard sizes.
    pub sizes: Option<Vec<usize>>,
    /// Defaults to the problem's standard costs.
    pub costs: Option<Vec<f64>>,
    pub reps: usize,
    pub seed: u64,
    pub n_test: usize,
    pub mode: Mode,
    pub strategy: Strategy,
    pub budget: f64,
    pub maximin_candidates: usize,
    /// Also fit a single-level GP on the top-level data alone.
    pub baseline: bool,
    pub al: AlOptions,
    /// Policy for spreading repetitions across threads.
    pub exec: Exec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: Problem::Perdikaris,
            kernel: KernelKind::SqExp,
            sizes: None,
            costs: None,
            reps: 20,
            seed: 0,
            n_test: 1000,
            mode: Mode::Emulation,
            strategy: Strategy::Almc,
            budget: 0.0,
            maximin_candidates: 10,
            baseline: false,
            al: AlOptions::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRow {
    pub rep: usize,
    pub seed: u64,
    pub rmse: Option<f64>,
    pub crps: Option<f64>,
    pub baseline_rmse: Option<f64>,
    pub seconds: f64,
    /// AL mode only.
    pub accrued_cost: Option<f64>,
    pub error: Option<String>,
}

/// One point of a metric-vs-cost curve (AL mode). Step 0 is the initial fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rep: usize,
    pub step: usize,
    pub cost: f64,
    pub rmse: f64,
    pub crps: f64,
    pub level: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolation quantiles; `None` for an empty slice.
pub fn quantiles(values: &[f64]) -> Option<Quantiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (i, frac) = (pos.floor() as usize, pos.fract());
        if i + 1 < v.len() {
            v[i] + frac * (v[i + 1] - v[i])
        } else {
            v[i]
        }
    };
    Some(Quantiles { min: v[0], q25: q(0.25), median: q(0.5), q75: q(0.75), max: v[v.len() - 1] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: Problem,
    pub kernel: KernelKind,
    pub mode: Mode,
    pub reps: usize,
    pub failed: usize,
    pub rmse: Option<Quantiles>,
    pub crps: Option<Quantiles>,
    pub baseline_rmse: Option<Quantiles>,
    pub seconds: Option<Quantiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub rows: Vec<RepetitionRow>,
    pub curves: Vec<CurvePoint>,
    pub summary: Summary,
}

/// Seed for stream `stream` of repetition `rep`.
pub fn rep_seed(seed: u64, rep: usize, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(rep as u64);
    rng.next_u64()
}

/// Single-level GP on the top-level data only, scored on `test`.
pub fn high_fidelity_only_rmse(ds: &MultiFidelityDataset, kind: KernelKind, fit: &FitOptions, test: &TestSet) -> Result<f64> {
    let top = ds.levels - 1;
    let single = MultiFidelityDataset::new(
        ds.bounds.clone(),
        vec![ds.costs[top]],
        vec![ds.designs[top].clone()],
        vec![ds.outputs[top].clone()],
    )?;
    let em = RnaEmulator::fit(&single, kind, fit)?;
    Ok(active_learning::evaluate(&em, test, Exec::Sequential)?.rmse)
}

fn run_rep(cfg: &ExperimentConfig, sizes: &[usize], costs: &[f64], rep: usize) -> (RepetitionRow, Vec<CurvePoint>) {
    let seed = rep_seed(cfg.seed, rep, 0);
    let start = Instant::now();
    let mut row = RepetitionRow {
        rep,
        seed,
        rmse: None,
        crps: None,
        baseline_rmse: None,
        seconds: 0.0,
        accrued_cost: None,
        error: None,
    };
    let mut curve = Vec::new();
    // Repetitions already run in parallel, so the inner loops stay sequential.
    let mut fit = FitOptions { exec: Exec::Sequential, ..cfg.al.fit.clone() };
    fit.rng_seed = fit.rng_seed.wrapping_add(seed);
    let result = (|| -> Result<()> {
        let ds = cfg.problem.dataset(sizes, costs, seed, cfg.maximin_candidates)?;
        let test = cfg.problem.test_set(cfg.n_test, rep_seed(cfg.seed, rep, 1))?;
        if cfg.baseline {
            row.baseline_rmse = Some(high_fidelity_only_rmse(&ds, cfg.kernel, &fit, &test)?);
        }
        match cfg.mode {
            Mode::Emulation => {
                let em = RnaEmulator::fit(&ds, cfg.kernel, &fit)?;
                let m = active_learning::evaluate(&em, &test, Exec::Sequential)?;
                row.rmse = Some(m.rmse);
                row.crps = Some(m.crps);
            }
            Mode::Al => {
                let cm = CostModel::new(costs.to_vec())?;
                let opts = AlOptions { fit: fit.clone(), exec: Exec::Sequential, seed: rep_seed(cfg.seed, rep, 2), ..cfg.al.clone() };
                let problem = cfg.problem;
                let mut sim = |l: usize, x: &[f64]| problem.evaluate(l, x);
                let out = al_loop(&mut sim, ds, cfg.strategy, &cm, cfg.budget, cfg.kernel, &opts, Some(&test))?;
                if let Some(m) = out.trace.initial {
                    curve.push(CurvePoint { rep, step: 0, cost: 0.0, rmse: m.rmse, crps: m.crps, level: None });
                }
                for r in &out.trace.records {
                    if let (Some(rmse), Some(crps)) = (r.rmse, r.crps) {
                        curve.push(CurvePoint { rep, step: r.step, cost: r.accrued_cost, rmse, crps, level: Some(r.level) });
                    }
                }
                let last = curve.last().cloned();
                row.rmse = last.as_ref().map(|c| c.rmse);
                row.crps = last.as_ref().map(|c| c.crps);
                row.accrued_cost = Some(out.trace.accrued_cost());
                if let Some(e) = out.error {
                    return Err(e);
                }
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        row.error = Some(format!("repetition {rep}: {e}"));
    }
    row.seconds = start.elapsed().as_secs_f64();
    (row, curve)
}

/// Run `reps` independent repetitions. A failing repetition is recorded in
/// its row and does not stop the batch.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    if cfg.reps == 0 {
        return Err(Error::Argument("reps must be at least 1".into()));
    }
    if cfg.n_test == 0 {
        return Err(Error::Argument("n_test must be at least 1".into()));
    }
    let sizes = cfg.sizes.clone().unwrap_or_else(|| cfg.problem.default_sizes());
    let costs = cfg.costs.clone().unwrap_or_else(|| cfg.problem.default_costs());
    if sizes.len() != cfg.problem.levels() || costs.len() != cfg.problem.levels() {
        return Err(Error::Argument(format!(
            "{} has {} levels; got {} sizes and {} costs",
            cfg.problem.name(),
            cfg.problem.levels(),
            sizes.len(),
            costs.len()
        )));
    }
    CostModel::new(costs.clone())?;
    let out = par::map_range(cfg.exec, cfg.reps, |rep| run_rep(cfg, &sizes, &costs, rep));
    let mut rows = Vec::with_capacity(out.len());
    let mut curves = Vec::new();
    for (r, c) in out {
        rows.push(r);
        curves.extend(c);
    }
    let ok: Vec<&RepetitionRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let collect = |f: &dyn Fn(&RepetitionRow) -> Option<f64>| quantiles(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    let summary = Summary {
        problem: cfg.problem,
        kernel: cfg.kernel,
        mode: cfg.mode,
        reps: cfg.reps,
        failed: rows.len() - ok.len(),
        rmse: collect(&|r| r.rmse),
        crps: collect(&|r| r.crps),
        baseline_rmse: collect(&|r| r.baseline_rmse),
        seconds: collect(&|r| Some(r.seconds)),
    };
    Ok(ExperimentResults { rows, curves, summary })
}
