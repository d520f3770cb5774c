//! `learnreg` command-line front-end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use learnreg::dataset::DataSet;
use learnreg::experiment::RunConfig;
use learnreg::inner::{nesterov_solve, InnerProblem, InnerStatus, Regularizer};
use learnreg::Error;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "learnreg",
    version,
    about = "Learn neural-network regularizers for a 1D inverse conductivity problem"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training data set (`dataset.json`).
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train a regularizer (`report.json`, `misfit.csv`, `weights.json`).
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Data set to train on; generated from the configuration when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Initial regularizer instead of random weights.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Worker threads for the per-datum solves.
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Solve one inner problem with given weights (`solution.json`).
    SolveInner {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Regularizer or bare network file
        #[arg(long)]
        weights: PathBuf,
        /// Datum whose target state is used.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Starting control: a `solution.json` or a JSON array. Defaults to the mean control.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Sample the graph of a scalar-input regularizer (`graph.csv`).
    Eval {
        /// Regularizer or bare network file
        #[arg(long)]
        weights: PathBuf,
        /// `LO:HI:POINTS`.
        #[arg(long, default_value = "0.5:1.5:101")]
        grid: String,
        /// Add the column `(3/2) u²`.
        #[arg(long)]
        reference: bool,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: `experiment1` or `experiment2`.
    #[arg(long)]
    preset: Option<String>,
    /// Seed for data, noise and initial weights.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OutArg {
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code: 1 usage, I/O or validation; 2 numerical or stagnation;
/// 3 non-convergence.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn in_stage(stage: &str, e: Error) -> Self {
        let code = match e {
            Error::Stagnation { .. } | Error::Numerical(_) | Error::Ellipticity { .. } => 2,
            Error::NonConvergence { .. } => 3,
            _ => 1,
        };
        Self {
            code,
            message: format!("{stage}: {e}"),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_error(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

fn out_dir(arg: &OutArg) -> CliResult<&Path> {
    if arg.out.is_dir() {
        Ok(&arg.out)
    } else {
        Err(Failure::usage(format!(
            "output directory {} does not exist",
            arg.out.display()
        )))
    }
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    write(path, &s)
}

fn load_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let s = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            serde_json::from_str(&s).map_err(|e| io_error(path, e))?
        }
        (None, Some(name)) => RunConfig::preset(name)
            .ok_or_else(|| Failure::usage(format!("unknown preset {name:?}")))?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()
        .map_err(|e| Failure::in_stage("configuration", e))?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> CliResult<DataSet> {
    DataSet::load(path).map_err(|e| io_error(path, e))
}

fn load_regularizer(path: &Path) -> CliResult<Regularizer> {
    Regularizer::load(path).map_err(|e| io_error(path, e))
}

fn gen_data(run: &RunArgs, out: &OutArg) -> CliResult<()> {
    let dir = out_dir(out)?;
    let cfg = load_config(run)?;
    let ds = cfg
        .dataset()
        .map_err(|e| Failure::in_stage("data generation", e))?;
    let path = dir.join("dataset.json");
    ds.save(&path).map_err(|e| io_error(&path, e))?;
    eprintln!("wrote {} ({} pairs)", path.display(), ds.len());
    Ok(())
}

fn train(
    run: &RunArgs,
    dataset: Option<&Path>,
    init: Option<&Path>,
    workers: Option<usize>,
    out: &OutArg,
) -> CliResult<()> {
    let dir = out_dir(out)?;
    let mut cfg = load_config(run)?;
    if workers.is_some() {
        cfg.train.workers = workers;
    }
    let ds = match dataset {
        Some(path) => load_dataset(path)?,
        None => {
            let ds = cfg
                .dataset()
                .map_err(|e| Failure::in_stage("data generation", e))?;
            let path = dir.join("dataset.json");
            ds.save(&path).map_err(|e| io_error(&path, e))?;
            ds
        }
    };
    let reg = match init {
        Some(path) => load_regularizer(path)?,
        None => cfg
            .initial_regularizer()
            .map_err(|e| Failure::in_stage("initialization", e))?,
    };
    let report = learnreg::outer::bb_solve_with(&ds, &reg, &cfg.train, |step, it| {
        eprintln!(
            "step {step:3}  misfit {:8.3}%  grad {:.3e}  step size {:.3e}",
            it.extra.misfit_percent, it.gradient_norm, it.step
        );
    })
    .map_err(|e| Failure::in_stage("training", e))?;

    write_json(&dir.join("report.json"), &report)?;
    write(&dir.join("misfit.csv"), &report.misfit_csv())?;
    write_json(&dir.join("weights.json"), &report.final_weights)?;
    eprintln!(
        "{:?} after {} steps, minimum misfit {:.3}%",
        report.stop_reason,
        report.steps() - 1,
        report.min_misfit()
    );
    match report.stop_reason {
        learnreg::outer::StopReason::Stagnated => Err(Failure {
            code: 2,
            message: "training: no acceptable step along the gradient".into(),
        }),
        _ => Ok(()),
    }
}

#[derive(Serialize, Deserialize)]
struct SolutionFile {
    index: usize,
    u: Vec<f64>,
    y: Vec<f64>,
    objective: f64,
    grad_norm: f64,
    projected_grad_norm: f64,
    iterations: usize,
    status: InnerStatus,
}

fn read_control(path: &Path) -> CliResult<Vec<f64>> {
    let s = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&s).map_err(|e| io_error(path, e))?;
    let array = value.get("u").unwrap_or(&value);
    serde_json::from_value(array.clone()).map_err(|e| io_error(path, e))
}

fn solve_inner(
    run: &RunArgs,
    dataset: &Path,
    weights: &Path,
    index: usize,
    init: Option<&Path>,
    out: &OutArg,
) -> CliResult<()> {
    let dir = out_dir(out)?;
    let cfg = load_config(run)?;
    let ds = load_dataset(dataset)?;
    let reg = load_regularizer(weights)?;
    let pair = ds.pairs.get(index).ok_or_else(|| {
        Failure::usage(format!("index {index} out of range for {} pairs", ds.len()))
    })?;
    let u0 = match init {
        Some(path) => DVector::from_vec(read_control(path)?),
        None => ds.mean_control(),
    };
    let stage = |e| Failure::in_stage("inner solve", e);
    let prob = InnerProblem::new(&ds.space, &ds.data, &pair.z_hat, &reg).map_err(stage)?;
    let sol = nesterov_solve(&prob, &u0, &cfg.train.inner).map_err(stage)?;
    let file = SolutionFile {
        index,
        u: sol.u.iter().copied().collect(),
        y: sol.y.iter().copied().collect(),
        objective: sol.objective,
        grad_norm: sol.grad_norm,
        projected_grad_norm: sol.projected_grad_norm,
        iterations: sol.iterations,
        status: sol.status,
    };
    write_json(&dir.join("solution.json"), &file)?;
    eprintln!(
        "{:?} after {} iterations, projected gradient {:.3e}",
        sol.status, sol.iterations, sol.projected_grad_norm
    );
    if sol.converged() {
        Ok(())
    } else {
        Err(Failure::in_stage(
            "inner solve",
            Error::NonConvergence {
                iterations: sol.iterations,
                residual: sol.projected_grad_norm,
            },
        ))
    }
}

fn parse_grid(s: &str) -> CliResult<(f64, f64, usize)> {
    let bad = || Failure::usage(format!("grid must be LO:HI:POINTS, got {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(bad());
    }
    Ok((lo, hi, n))
}

fn eval(weights: &Path, grid: &str, reference: bool, out: &OutArg) -> CliResult<()> {
    let dir = out_dir(out)?;
    let reg = load_regularizer(weights)?;
    if reg.n_in() != 1 {
        return Err(Failure::usage(format!(
            "graph mode needs a scalar-input network, {} has n_in = {}",
            weights.display(),
            reg.n_in()
        )));
    }
    let (lo, hi, n) = parse_grid(grid)?;
    let mut csv = String::from(if reference {
        "u,r,reference\n"
    } else {
        "u,r\n"
    });
    for i in 0..n {
        let u = if n == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        };
        let r = reg
            .value(&DVector::from_element(1, u))
            .map_err(|e| Failure::in_stage("evaluation", e))?;
        if reference {
            writeln!(csv, "{u},{r},{}", 1.5 * u * u).unwrap();
        } else {
            writeln!(csv, "{u},{r}").unwrap();
        }
    }
    write(&dir.join("graph.csv"), &csv)
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData { run, out } => gen_data(run, out),
        Command::Train {
            run,
            dataset,
            init,
            workers,
            out,
        } => train(run, dataset.as_deref(), init.as_deref(), *workers, out),
        Command::SolveInner {
            run,
            dataset,
            weights,
            index,
            init,
            out,
        } => solve_inner(run, dataset, weights, *index, init.as_deref(), out),
        Command::Eval {
            weights,
            grid,
            reference,
            out,
        } => eval(weights, grid, *reference, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
