//! `rnamf`: fit, query and grow recursive multi-fidelity emulators.

mod adapter;
mod commands;
mod error;
mod io;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rnamf::benchmarks::Problem;

use crate::error::{CliError, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "rnamf", version, about = "Recursive non-additive multi-fidelity emulation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit every level by maximum likelihood and save the hyperparameters.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-level fit report (JSON); printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Posterior mean, variance and variance decomposition as CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON array of points.
        #[arg(long, conflicts_with = "grid")]
        points: Option<PathBuf>,
        /// Regular grid with this many points per axis.
        #[arg(long)]
        grid: Option<usize>,
        /// Fidelity level to predict (default: the highest).
        #[arg(long)]
        level: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Budgeted active learning against a built-in problem or external simulators.
    Al {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "adapter")]
        builtin: Option<Problem>,
        /// Simulator command; repeat once per level or give one for all levels.
        #[arg(long)]
        adapter: Vec<String>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Where to write the grown dataset.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Repeated emulation or active-learning experiments on a built-in problem.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Worker threads for repetitions.
        #[arg(long)]
        jobs: Option<usize>,
        /// Skip the SVG charts.
        #[arg(long)]
        no_svg: bool,
    },
    /// Nested space-filling design, optionally evaluated on a built-in problem.
    Design {
        /// Level sizes, largest first, e.g. 13,8.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        dim: Option<usize>,
        /// Box as lo:hi pairs separated by commas.
        #[arg(long)]
        bounds: Option<String>,
        #[arg(long, conflicts_with_all = ["dim", "bounds"])]
        problem: Option<Problem>,
        #[arg(long, value_delimiter = ',')]
        costs: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximin candidates per level.
        #[arg(long, default_value_t = 10)]
        candidates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a dataset file and report nesting violations.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Fit { data, config, out, report } => commands::fit(&data, config.as_deref(), &out, report.as_deref()),
        Cmd::Predict { model, data, points, grid, level, out } => {
            commands::predict(&model, &data, points.as_deref(), grid, level, &out)
        }
        Cmd::Al { data, config, builtin, adapter, trace, out, cache } => commands::al(commands::AlArgs {
            data: &data,
            config: config.as_deref(),
            builtin,
            adapters: &adapter,
            trace: trace.as_deref(),
            out: out.as_deref(),
            cache: cache.as_deref(),
        }),
        Cmd::Benchmark { config, out_dir, jobs, no_svg } => commands::benchmark(&config, &out_dir, jobs, !no_svg),
        Cmd::Design { sizes, dim, bounds, problem, costs, seed, candidates, out } => commands::design(commands::DesignArgs {
            sizes: &sizes,
            dim,
            bounds: bounds.as_deref(),
            problem,
            costs: costs.as_deref(),
            seed,
            candidates,
            out: &out,
        }),
        Cmd::Validate { data } => commands::validate(&data),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e).expect("errors serialize"));
            ExitCode::from(e.code as u8)
        }
    }
}
