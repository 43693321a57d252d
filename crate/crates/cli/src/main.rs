//! `madml`: command-line front end for the estimator and the simulation
//! harness.
//!
//! Exit codes: 0 success, 1 computation failure, 2 usage or configuration
//! error, 3 data validation error. Failures print a JSON object on stderr.

mod config;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use madml::dataset::{load_csv, normalize_unit_interval, trim_quantiles, Dataset, Schema};
use madml::estimator::{fit, write_grid_csv, CateFit, FitMode};
use madml::penalty::PenaltyMethod;
use madml::simulation::{run_monte_carlo, write_report_csv, Dgp, SimulationReport};
use madml::{Error, Execution};
use serde::Serialize;

use config::{KnotsArg, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "madml", version, about = "Doubly-robust CATE estimation with uniform confidence bands")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate E[Y_d | X = x] for one treatment arm.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ArmArg::Treated)]
        arm: ArmArg,
    },
    /// Estimate the CATE E[Y_1 - Y_0 | X = x] from both arms.
    Cate {
        #[command(flatten)]
        common: Common,
        /// Estimate only the treated-arm mean, exactly as `fit` does.
        #[arg(long)]
        single_arm: bool,
    },
    /// Run the Monte Carlo study on a simulated design.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Simulation design: s1, s2 or s3.
        #[arg(long, value_parser = clap::value_parser!(Dgp))]
        dgp: Option<Dgp>,
        /// Sample size per replication.
        #[arg(long)]
        n: Option<usize>,
        /// Number of controls, including the intercept and X.
        #[arg(long)]
        dz: Option<usize>,
        /// Number of replications.
        #[arg(long)]
        reps: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Master seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the hardware parallelism.
    #[arg(long)]
    threads: Option<usize>,
    /// Interior knot count, or a comma-separated breakpoint list.
    #[arg(long)]
    knots: Option<KnotsArg>,
    /// B-spline degree.
    #[arg(long)]
    degree: Option<usize>,
    /// Bands have confidence level 1 - eta.
    #[arg(long)]
    eta: Option<f64>,
    /// Number of evaluation grid points.
    #[arg(long)]
    grid: Option<usize>,
    /// Bootstrap draws for penalty selection and uniform bands.
    #[arg(long)]
    boot: Option<usize>,
    /// Penalty inflation constant (must exceed 1).
    #[arg(long)]
    c0: Option<f64>,
    /// How the first-stage penalties are chosen.
    #[arg(long, value_enum)]
    penalty_method: Option<MethodArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Treated,
    Control,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Bootstrap,
    CvOnly,
}

impl From<MethodArg> for PenaltyMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Bootstrap => PenaltyMethod::Bootstrap,
            MethodArg::CvOnly => PenaltyMethod::CvOnly,
        }
    }
}

/// A failure together with its exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    kind: String,
    message: String,
    path: Option<PathBuf>,
}

impl CliError {
    pub fn usage(kind: &str, message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            kind: kind.into(),
            message: message.into(),
            path: None,
        }
    }

    pub fn with_path(mut self, path: &Path) -> Self {
        self.path = Some(path.to_path_buf());
        self
    }

    /// Errors while reading the inputs: a missing file is a usage error,
    /// malformed contents a data error.
    fn input(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Config(_) => 2,
            e if e.is_data_error() => 3,
            _ => 1,
        };
        CliError::from_core(e, code)
    }

    fn compute(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_) | Error::BasisSpec(_)) { 2 } else { 1 };
        CliError::from_core(e, code)
    }

    fn from_core(e: Error, code: u8) -> Self {
        let path = match &e {
            Error::Io { path, .. } => Some(path.clone()),
            _ => None,
        };
        CliError {
            code,
            kind: e.kind().into(),
            message: e.to_string(),
            path,
        }
    }

    fn write_io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            code: 1,
            kind: "io".into(),
            message: format!("cannot write {}: {e}", path.display()),
            path: Some(path.to_path_buf()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<&'a Path>,
    exit_code: u8,
}

#[derive(Serialize)]
struct FitOutput<'a> {
    command: &'a str,
    config: &'a RunConfig,
    fit: &'a CateFit,
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    command: &'a str,
    config: &'a RunConfig,
    report: &'a SimulationReport,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: &e.kind,
                message: &e.message,
                path: e.path.as_deref(),
                exit_code: e.code,
            };
            let text = serde_json::to_string(&report).unwrap_or_else(|_| e.message.clone());
            let _ = writeln!(std::io::stderr(), "{text}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit { common, arm } => {
            let mode = match arm {
                ArmArg::Treated => FitMode::Treated,
                ArmArg::Control => FitMode::Control,
            };
            estimate(&common, mode, "fit")
        }
        Command::Cate { common, single_arm } => {
            if single_arm {
                estimate(&common, FitMode::Treated, "fit")
            } else {
                estimate(&common, FitMode::Cate, "cate")
            }
        }
        Command::Simulate { common, dgp, n, dz, reps } => {
            let mut o = overrides(&common);
            o.dgp = dgp;
            o.n = n;
            o.dz = dz;
            o.reps = reps;
            simulate(&common, &o)
        }
    }
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        data: c.data.clone(),
        seed: c.seed,
        knots: c.knots.clone(),
        degree: c.degree,
        eta: c.eta,
        grid: c.grid,
        boot: c.boot,
        c0: c.c0,
        penalty_method: c.penalty_method.map(Into::into),
        ..Default::default()
    }
}

fn configure(common: &Common, o: &Overrides) -> Result<RunConfig, CliError> {
    init_threads(common.threads)?;
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.effective(o))
}

#[cfg(feature = "parallel")]
fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::usage("config", "--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage("config", format!("cannot start the worker pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    match threads {
        Some(0) => Err(CliError::usage("config", "--threads must be at least 1")),
        _ => Ok(()),
    }
}

fn prepare_output(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::write_io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::compute(Error::Numerical(format!("cannot serialize output: {e}"))))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::write_io(path, e))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| CliError::usage("config", "no input data: pass --data or set data.path"))?;
    if !path.is_file() {
        return Err(CliError::usage("io", format!("data file {} does not exist", path.display())).with_path(path));
    }
    let schema = match &cfg.data.schema {
        Some(s) => s.clone(),
        None => Schema::from_header(path, ',').map_err(CliError::input)?,
    };
    let ds = load_csv(path, &schema).map_err(CliError::input)?;
    let pre = &cfg.preprocess;
    let ds = if pre.trim_lower_q > 0.0 || pre.trim_upper_q > 0.0 || pre.min_group_rows > 0 {
        trim_quantiles(&ds, pre).map_err(CliError::input)?.0
    } else {
        ds
    };
    Ok(if pre.normalize { normalize_unit_interval(&ds) } else { ds })
}

fn estimate(common: &Common, mode: FitMode, command: &str) -> Result<(), CliError> {
    let cfg = configure(common, &overrides(common))?;
    let fit_cfg = cfg.fit_config();
    fit_cfg.validate().map_err(CliError::input)?;
    let ds = load_data(&cfg)?;
    let result = fit(&ds, &fit_cfg, mode, Execution::Parallel).map_err(CliError::compute)?;

    prepare_output(&common.out)?;
    let json = common.out.join("fit.json");
    let csv = common.out.join("grid.csv");
    write_json(&json, &FitOutput { command, config: &cfg, fit: &result })?;
    write_grid_csv(&result, &csv).map_err(CliError::compute)?;
    print_fit_summary(&result, &json, &csv);
    Ok(())
}

fn print_fit_summary(f: &CateFit, json: &Path, csv: &Path) {
    println!("n = {}, d_z = {}, k = {}", f.n, f.d_z, f.k);
    for (sel, arm) in f.penalties.iter().zip(&f.arms) {
        for (j, t) in sel.terms.iter().enumerate() {
            println!(
                "{:?} term {j}: lambda_gamma = {:.4e}, lambda_alpha = {:.4e} (c_gamma = {:.4}, c_alpha = {:.4})",
                arm.arm, t.lambda_gamma, t.lambda_alpha, t.c_gamma, t.c_alpha
            );
        }
        println!("{:?} clip events: {}", arm.arm, arm.clip_events());
    }
    println!(
        "critical values at eta = {}: pointwise {:.4}, uniform {:.4}",
        f.eta, f.bands.normal_crit, f.bands.uniform_crit
    );
    println!("wrote {} and {}", json.display(), csv.display());
}

fn simulate(common: &Common, o: &Overrides) -> Result<(), CliError> {
    let cfg = configure(common, o)?;
    let mc = cfg.monte_carlo_config();
    mc.validate().map_err(CliError::input)?;
    let report = run_monte_carlo(&mc, Execution::Parallel).map_err(CliError::compute)?;

    prepare_output(&common.out)?;
    let json = common.out.join("report.json");
    let csv = common.out.join("report.csv");
    write_json(&json, &SimulateOutput { command: "simulate", config: &cfg, report: &report })?;
    write_report_csv(&report, &csv).map_err(CliError::compute)?;
    for r in &report.rows {
        println!(
            "{}: IBias2 {:.4}, IVar {:.4}, IMSE {:.4}, Cov95 {:.3}, UCov95 {:.3}, {} reps, {} failures{}",
            r.estimator.label(),
            r.ibias2,
            r.ivar,
            r.imse,
            r.cov95,
            r.ucov95,
            r.reps_completed,
            r.failures,
            if r.valid { "" } else { " (too many failures: invalid)" }
        );
    }
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}
