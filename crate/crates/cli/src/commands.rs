use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use rnamf::active_learning::{al_loop, AlOptions, AlTrace, AlcOptions, CostModel, OptimizerOptions, Strategy};
use rnamf::benchmarks::{self, ExperimentConfig, ExperimentResults, Mode, Problem};
use rnamf::dataset::MultiFidelityDataset;
use rnamf::design::{nested_design, NestingViolation};
use rnamf::emulator::{LevelHyper, RnaEmulator};
use rnamf::{Exec, FitOptions, KernelKind};

use crate::adapter::{AdapterSpec, Backend, CachedSimulator, EvalCache, DEFAULT_TIMEOUT_SECS};
use crate::error::CliError;
use crate::io::{self, num, opt_num};
use crate::svg;

/// Settings shared by `fit` and `al`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kernel: KernelKind,
    pub fit: FitOptions,
    pub strategy: Strategy,
    pub budget: f64,
    /// Per-level costs; the dataset's costs when absent.
    pub costs: Option<Vec<f64>>,
    pub alc: AlcOptions,
    pub optimizer: OptimizerOptions,
    pub seed: u64,
    /// Test points for RMSE/CRPS in the trace (built-in problems only).
    pub n_test: usize,
    pub timeout_secs: f64,
    pub exec: Exec,
    pub trace: Option<PathBuf>,
    pub dataset_out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kernel: KernelKind::SqExp,
            fit: FitOptions::default(),
            strategy: Strategy::Almc,
            budget: 0.0,
            costs: None,
            alc: AlcOptions::default(),
            optimizer: OptimizerOptions::default(),
            seed: 0,
            n_test: 1000,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            exec: Exec::default(),
            trace: None,
            dataset_out: None,
            cache: None,
        }
    }
}

/// Print a line, ignoring a closed pipe on the reading side.
fn print_stdout(s: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{s}");
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = match path {
        Some(p) => io::read_json(p, "config")?,
        None => RunConfig::default(),
    };
    cfg.fit.validate().map_err(|e| CliError::validation(format!("config: {e}")))?;
    if !(cfg.timeout_secs.is_finite() && cfg.timeout_secs > 0.0) {
        return Err(CliError::validation("config: timeout_secs must be positive"));
    }
    Ok(cfg)
}

/// On-disk emulator: hyperparameters plus the fingerprint of the dataset
/// they were fitted to. Factorizations are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulatorFile {
    pub format: u32,
    pub kernel: KernelKind,
    pub levels: usize,
    pub dim: usize,
    pub dataset_sha256: String,
    pub hyperparameters: Vec<LevelHyper>,
}

#[derive(Debug, Serialize)]
struct LevelReport {
    level: usize,
    n: usize,
    neg_log_likelihood: f64,
    alpha: f64,
    tau_sq: f64,
    lengthscales: Vec<f64>,
    jitter: f64,
}

pub fn fit(data: &Path, config: Option<&Path>, out: &Path, report: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let ds = io::load_dataset(data)?;
    let em = RnaEmulator::fit(&ds, cfg.kernel, &cfg.fit)?;
    let file = EmulatorFile {
        format: 1,
        kernel: cfg.kernel,
        levels: ds.levels,
        dim: ds.dim,
        dataset_sha256: io::fingerprint(&ds),
        hyperparameters: em.hyperparameters(),
    };
    io::write_json(out, &file)?;
    let levels: Vec<LevelReport> = (1..=ds.levels)
        .map(|l| {
            let m = em.level_model(l);
            LevelReport {
                level: l,
                n: m.n(),
                neg_log_likelihood: m.nll,
                alpha: m.alpha,
                tau_sq: m.tau_sq,
                lengthscales: m.theta().to_vec(),
                jitter: m.jitter,
            }
        })
        .collect();
    let rep = serde_json::json!({ "kernel": cfg.kernel, "levels": levels });
    match report {
        Some(p) => io::write_json(p, &rep)?,
        None => print_stdout(&serde_json::to_string_pretty(&rep).expect("report serializes")),
    }
    Ok(())
}

pub fn load_emulator(model: &Path, data: &Path) -> Result<RnaEmulator, CliError> {
    let file: EmulatorFile = io::read_json(model, "emulator")?;
    let ds = io::load_dataset(data)?;
    let fp = io::fingerprint(&ds);
    if fp != file.dataset_sha256 {
        return Err(CliError::stale(format!(
            "emulator {} was fitted to dataset {} but {} has fingerprint {fp}; refit the model",
            model.display(),
            file.dataset_sha256,
            data.display()
        )));
    }
    Ok(RnaEmulator::from_hyperparameters(&ds, file.kernel, &file.hyperparameters)?)
}

fn grid(bounds: &[(f64, f64)], n: usize) -> Vec<Vec<f64>> {
    let d = bounds.len();
    let total = n.pow(d as u32);
    (0..total)
        .map(|k| {
            let mut idx = k;
            let mut p = vec![0.0; d];
            // First coordinate varies slowest.
            for j in (0..d).rev() {
                let (lo, hi) = bounds[j];
                let t = if n > 1 { (idx % n) as f64 / (n - 1) as f64 } else { 0.5 };
                p[j] = lo + t * (hi - lo);
                idx /= n;
            }
            p
        })
        .collect()
}

pub fn predict(
    model: &Path,
    data: &Path,
    points: Option<&Path>,
    grid_n: Option<usize>,
    level: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let em = load_emulator(model, data)?;
    let pts: Vec<Vec<f64>> = match (points, grid_n) {
        (Some(p), None) => io::read_json(p, "points")?,
        (None, Some(n)) if n >= 1 => grid(&em.dataset().bounds, n),
        (None, Some(_)) => return Err(CliError::usage("--grid needs at least one point per axis")),
        _ => return Err(CliError::usage("give exactly one of --points or --grid")),
    };
    let top = em.levels();
    let level = level.unwrap_or(top);
    if level == 0 || level > top {
        return Err(CliError::usage(format!("level {level} is outside 1..={top}")));
    }
    let decompose = level == top && top <= 3;
    let mut header: Vec<String> = (1..=em.dim()).map(|j| format!("x{j}")).collect();
    header.extend(["mean".to_string(), "var".to_string()]);
    if decompose {
        header.extend((1..=top).map(|l| format!("V{l}")));
    }
    header.push("extrapolated".into());
    let mut rows = Vec::with_capacity(pts.len());
    for x in &pts {
        if x.len() != em.dim() {
            return Err(CliError::validation(format!("point {x:?} has {} coordinates, expected {}", x.len(), em.dim())));
        }
        let p = em.predict(x, level)?;
        let mut row: Vec<String> = x.iter().map(|v| num(*v)).collect();
        row.push(num(p.mean));
        row.push(num(p.var));
        if decompose {
            if top == 1 {
                row.push(num(p.var));
            } else {
                row.extend(em.variance_decomposition(x)?.values.iter().map(|v| num(*v)));
            }
        }
        row.push(p.extrapolated.to_string());
        rows.push(row);
    }
    io::write_csv(out, &header, &rows)
}

pub struct AlArgs<'a> {
    pub data: &'a Path,
    pub config: Option<&'a Path>,
    pub builtin: Option<Problem>,
    pub adapters: &'a [String],
    pub trace: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub cache: Option<&'a Path>,
}

fn trace_rows(trace: &AlTrace, dim: usize, levels: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["step".to_string(), "strategy".into(), "level".into()];
    header.extend((1..=dim).map(|j| format!("x{j}")));
    header.push("imputed".into());
    header.extend((1..=levels).map(|l| format!("y{l}")));
    header.extend(["criterion".into(), "cost".into(), "rmse".into(), "crps".into()]);
    let rows = trace
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.step.to_string(), r.strategy.name().to_string(), r.level.to_string()];
            row.extend(r.location.iter().map(|v| num(*v)));
            row.push(r.imputed.to_string());
            row.extend((0..levels).map(|l| opt_num(r.outputs.get(l).copied())));
            row.extend([num(r.criterion_value), num(r.accrued_cost), opt_num(r.rmse), opt_num(r.crps)]);
            row
        })
        .collect();
    (header, rows)
}

pub fn al(args: AlArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config)?;
    let ds = io::load_dataset(args.data)?;
    let trace_path = args
        .trace
        .map(Path::to_path_buf)
        .or(cfg.trace.clone())
        .ok_or_else(|| CliError::usage("an output trace path is required (--trace or config.trace)"))?;
    let data_out = args
        .out
        .map(Path::to_path_buf)
        .or(cfg.dataset_out.clone())
        .ok_or_else(|| CliError::usage("an output dataset path is required (--out or config.dataset_out)"))?;
    let cache_path = args.cache.map(Path::to_path_buf).or(cfg.cache.clone()).unwrap_or_else(|| {
        let mut p = trace_path.clone().into_os_string();
        p.push(".cache.json");
        PathBuf::from(p)
    });
    let backend = match (args.builtin, args.adapters.is_empty()) {
        (Some(p), true) => {
            if p.dim() != ds.dim || p.levels() != ds.levels {
                return Err(CliError::validation(format!(
                    "built-in {} has d = {} and {} levels; the dataset has d = {} and {} levels",
                    p.name(),
                    p.dim(),
                    p.levels(),
                    ds.dim,
                    ds.levels
                )));
            }
            Backend::Builtin(p)
        }
        (None, false) => {
            if args.adapters.len() != 1 && args.adapters.len() != ds.levels {
                return Err(CliError::usage(format!(
                    "give one adapter for every level or a single adapter; got {} for {} levels",
                    args.adapters.len(),
                    ds.levels
                )));
            }
            let adapters = args.adapters.iter().map(|s| AdapterSpec::parse(s)).collect::<Result<Vec<_>, _>>()?;
            Backend::External { adapters, timeout: Duration::from_secs_f64(cfg.timeout_secs) }
        }
        _ => return Err(CliError::usage("give either --builtin or at least one --adapter")),
    };
    let test = match &backend {
        Backend::Builtin(p) if cfg.n_test > 0 => Some(p.test_set(cfg.n_test, cfg.seed ^ 0x7e57)?),
        _ => None,
    };
    let costs = CostModel::new(cfg.costs.clone().unwrap_or_else(|| ds.costs.clone()))
        .map_err(|e| CliError::validation(format!("config: {e}")))?;
    let mut sim = CachedSimulator {
        backend,
        cache: EvalCache::load(&cache_path)?,
        cache_path: Some(cache_path),
        invocations: 0,
        failure: None,
    };
    let opts = AlOptions { fit: cfg.fit.clone(), optimizer: cfg.optimizer, alc: cfg.alc, seed: cfg.seed, exec: cfg.exec };
    let outcome = al_loop(&mut sim, ds, cfg.strategy, &costs, cfg.budget, cfg.kernel, &opts, test.as_ref())?;
    let (header, rows) = trace_rows(&outcome.trace, outcome.dataset.dim, outcome.dataset.levels);
    io::write_csv(&trace_path, &header, &rows)?;
    io::write_json(&data_out, &outcome.dataset)?;
    match outcome.error {
        None => Ok(()),
        Some(e) => Err(sim.failure.take().unwrap_or_else(|| CliError::from(e))),
    }
}

/// Step-function value of each repetition's curve on a common cost grid.
fn curve_band(results: &ExperimentResults, budget: f64, pick: fn(&benchmarks::CurvePoint) -> f64) -> Vec<[f64; 4]> {
    let reps: Vec<usize> = results.rows.iter().filter(|r| r.error.is_none()).map(|r| r.rep).collect();
    let steps = 50;
    (0..=steps)
        .map(|k| {
            let c = budget * k as f64 / steps as f64;
            let vals: Vec<f64> = reps
                .iter()
                .filter_map(|rep| results.curves.iter().filter(|p| p.rep == *rep && p.cost <= c + 1e-9).last().map(pick))
                .collect();
            match benchmarks::quantiles(&vals) {
                Some(q) => [c, q.median, q.min, q.max],
                None => [c, f64::NAN, f64::NAN, f64::NAN],
            }
        })
        .collect()
}

pub fn benchmark(config: &Path, out_dir: &Path, jobs: Option<usize>, svg_out: bool) -> Result<(), CliError> {
    let mut cfg: ExperimentConfig = io::read_json(config, "benchmark config")?;
    if cfg.reps == 0 {
        return Err(CliError::validation("benchmark config: reps must be at least 1"));
    }
    match jobs {
        Some(0) => return Err(CliError::usage("--jobs must be at least 1")),
        Some(1) => cfg.exec = Exec::Sequential,
        Some(n) => set_threads(n)?,
        None => {}
    }
    let results = benchmarks::run_experiment(&cfg)?;
    let header: Vec<String> = ["rep", "seed", "rmse", "crps", "baseline_rmse", "seconds", "accrued_cost", "error"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = results
        .rows
        .iter()
        .map(|r| {
            vec![
                r.rep.to_string(),
                r.seed.to_string(),
                opt_num(r.rmse),
                opt_num(r.crps),
                opt_num(r.baseline_rmse),
                num(r.seconds),
                opt_num(r.accrued_cost),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    io::write_csv(&out_dir.join("results.csv"), &header, &rows)?;
    if cfg.mode == Mode::Al {
        let header: Vec<String> = ["rep", "step", "cost", "rmse", "crps", "level"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<String>> = results
            .curves
            .iter()
            .map(|c| {
                vec![
                    c.rep.to_string(),
                    c.step.to_string(),
                    num(c.cost),
                    num(c.rmse),
                    num(c.crps),
                    c.level.map(|l| l.to_string()).unwrap_or_default(),
                ]
            })
            .collect();
        io::write_csv(&out_dir.join("curves.csv"), &header, &rows)?;
        if svg_out {
            for (name, pick) in [
                ("rmse", (|p: &benchmarks::CurvePoint| p.rmse) as fn(&benchmarks::CurvePoint) -> f64),
                ("crps", |p: &benchmarks::CurvePoint| p.crps),
            ] {
                let band = curve_band(&results, cfg.budget, pick);
                let col = |i: usize| band.iter().map(|b| b[i]).collect::<Vec<f64>>();
                let (x, med, lo, hi) = (col(0), col(1), col(2), col(3));
                let title = format!("{} {} ({})", cfg.problem.name(), cfg.strategy.name(), name.to_uppercase());
                let chart = svg::band_chart(&title, "simulation cost", name, &svg::Band { x: &x, median: &med, lo: &lo, hi: &hi });
                io::write_atomic(&out_dir.join(format!("{name}_vs_cost.svg")), chart.as_bytes())?;
            }
        }
    }
    io::write_json(&out_dir.join("summary.json"), &results.summary)?;
    if results.summary.failed == results.rows.len() {
        let first = results.rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(CliError::runtime(format!("every repetition failed; first error: {first}")));
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn set_threads(n: usize) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::runtime(format!("cannot start {n} worker threads: {e}")))
}

#[cfg(not(feature = "parallel"))]
fn set_threads(_: usize) -> Result<(), CliError> {
    Ok(())
}

pub struct DesignArgs<'a> {
    pub sizes: &'a [usize],
    pub dim: Option<usize>,
    pub bounds: Option<&'a str>,
    pub problem: Option<Problem>,
    pub costs: Option<&'a [f64]>,
    pub seed: u64,
    pub candidates: usize,
    pub out: &'a Path,
}

fn parse_bounds(s: &str) -> Result<Vec<(f64, f64)>, CliError> {
    s.split(',')
        .map(|pair| {
            let (lo, hi) = pair.split_once(':').ok_or_else(|| CliError::usage(format!("bound '{pair}' is not lo:hi")))?;
            let lo: f64 = lo.trim().parse().map_err(|_| CliError::usage(format!("bad lower bound '{lo}'")))?;
            let hi: f64 = hi.trim().parse().map_err(|_| CliError::usage(format!("bad upper bound '{hi}'")))?;
            if !(lo < hi) {
                return Err(CliError::usage(format!("bound {lo}:{hi} is empty")));
            }
            Ok((lo, hi))
        })
        .collect()
}

#[derive(Serialize)]
struct DesignFile {
    dim: usize,
    sizes: Vec<usize>,
    bounds: Vec<(f64, f64)>,
    designs: Vec<Vec<Vec<f64>>>,
}

pub fn design(args: DesignArgs) -> Result<(), CliError> {
    if let Some(p) = args.problem {
        if args.sizes.len() != p.levels() {
            return Err(CliError::usage(format!("{} has {} levels; got {} sizes", p.name(), p.levels(), args.sizes.len())));
        }
        let costs = args.costs.map(<[f64]>::to_vec).unwrap_or_else(|| p.default_costs());
        let ds: MultiFidelityDataset = p.dataset(args.sizes, &costs, args.seed, args.candidates)?;
        return io::write_json(args.out, &ds);
    }
    let bounds = match (args.bounds, args.dim) {
        (Some(b), dim) => {
            let b = parse_bounds(b)?;
            if dim.is_some_and(|d| d != b.len()) {
                return Err(CliError::usage("--dim disagrees with the number of --bounds"));
            }
            b
        }
        (None, Some(d)) if d > 0 => vec![(0.0, 1.0); d],
        _ => return Err(CliError::usage("give --dim, --bounds or --problem")),
    };
    let nd = nested_design(args.sizes, bounds.len(), args.seed, args.candidates)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let file = DesignFile { dim: nd.dim, sizes: nd.sizes.clone(), designs: nd.scaled(&bounds), bounds };
    io::write_json(args.out, &file)
}

#[derive(Serialize)]
struct ValidationReport {
    valid: bool,
    sizes: Vec<usize>,
    violations: Vec<NestingViolation>,
    message: Option<String>,
}

/// Print a validation report; invalid datasets exit with the validation code.
pub fn validate(data: &Path) -> Result<(), CliError> {
    let ds: MultiFidelityDataset = io::read_json(data, "dataset")?;
    let violations = ds.nesting_violations();
    let message = ds.validate().err().map(|e| e.to_string());
    let report = ValidationReport { valid: message.is_none(), sizes: ds.sizes(), violations, message: message.clone() };
    print_stdout(&serde_json::to_string_pretty(&report).expect("report serializes"));
    match message {
        None => Ok(()),
        Some(m) => Err(CliError::validation(format!("dataset {}: {m}", data.display()))),
    }
}
