//! Command-line front end: CSV ingestion, JSON run configuration, and the
//! `fit`, `simulate`, `moments`, `corr` and `compare` subcommands.

pub mod data;

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use conmix::estimate::{compare_models, ComparisonKind, ComparisonRow};
use conmix::model::params_from_natural;
use conmix::moments::{correlation_extremes, model_moments, profile_designs, raw_moments, TimeProfile};
use conmix::{fit, Error, FitOptions, FitResult, ModelSpec, Params, QuadratureRule, SimDesign};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use data::{read_dataset, write_dataset, DataError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Optimizer settings of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub starts: usize,
    pub jitter: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = FitOptions::default();
        Self { max_iter: o.max_iter, tol: o.tol, starts: o.starts, jitter: o.jitter }
    }
}

/// JSON run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub quadrature: QuadratureRule,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Design used by `simulate`.
    #[serde(default)]
    pub simulation: Option<SimDesign>,
    /// Covariate profile used by `moments` and `corr`.
    #[serde(default)]
    pub profile: Option<TimeProfile>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.optimizer.max_iter,
            tol: self.optimizer.tol,
            starts: self.optimizer.starts,
            jitter: self.optimizer.jitter,
            seed: self.seed,
            init: None,
        }
    }
}

/// Machine-readable output of `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub software: String,
    pub seed: u64,
    pub config: RunConfig,
    pub result: FitResult,
}

impl ResultFile {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Validation(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_)
            | Error::Overflow(_)
            | Error::Evaluation { .. }
            | Error::Initialization(_)
            | Error::FitFailure(_)
            | Error::Nonexistence(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Validation(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "conmix", version, about = "Combined conjugate and normal random-effects models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model by maximum likelihood.
    Fit(FitArgs),
    /// Simulate a dataset from a model.
    Simulate(SimArgs),
    /// Marginal means, variances and correlations over a time grid.
    Moments(GridArgs),
    /// Correlation function over a time grid with its extremes.
    Corr(GridArgs),
    /// Compare nested fits.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for `result.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quad_order: Option<usize>,
    #[arg(long)]
    no_adaptive: bool,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    /// Natural-scale parameters: a JSON file or an inline JSON object.
    #[arg(long)]
    params: String,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Model configuration (required with `--params`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Natural-scale parameters: a JSON file or an inline JSON object.
    #[arg(long, conflicts_with = "result")]
    params: Option<String>,
    /// A result file written by `fit`.
    #[arg(long)]
    result: Option<PathBuf>,
    /// Time grid: `a..b`, `a..b..step` or a comma-separated list.
    #[arg(long, default_value = "1..10")]
    grid: String,
    /// Column holding the time covariate.
    #[arg(long)]
    time_column: Option<String>,
    /// Fixed covariate values, `name=value`.
    #[arg(long = "at", value_name = "NAME=VALUE")]
    at: Vec<String>,
    /// Raw moments `E(Y^k)` up to this order (`moments` only).
    #[arg(long)]
    raw: Option<u32>,
    /// Also write the table as JSON to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Fitted result, `label=path`.
    #[arg(long = "fit", value_name = "LABEL=PATH", required = true)]
    fits: Vec<String>,
    /// Nested pair, `null:alt:kind` with kind one of wald_variance_boundary,
    /// lr_boundary, lr_interior.
    #[arg(long = "nest", value_name = "NULL:ALT:KIND", required = true)]
    nest: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Run the CLI on `argv` (program name first) and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    init_threads();
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a).map(|_| EXIT_OK),
        Command::Moments(a) => cmd_grid(a, false).map(|_| EXIT_OK),
        Command::Corr(a) => cmd_grid(a, true).map(|_| EXIT_OK),
        Command::Compare(a) => cmd_compare(a).map(|_| EXIT_OK),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("CONMIX_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // fails harmlessly when a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn cmd_fit(a: FitArgs) -> Result<i32, Failure> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(q) = a.quad_order {
        cfg.quadrature.order = q;
        cfg.quadrature.order_2d = q;
    }
    if a.no_adaptive {
        cfg.quadrature.adaptive = false;
    }
    if let Some(s) = a.starts {
        cfg.optimizer.starts = s;
    }
    if let Some(m) = a.max_iter {
        cfg.optimizer.max_iter = m;
    }
    if let Some(t) = a.tol {
        cfg.optimizer.tol = t;
    }
    let path = cfg.data.clone().ok_or_else(|| Failure::Usage("no data file: pass --data or set `data`".into()))?;
    let data = read_dataset(&path, cfg.model.family)?;
    let report = conmix::model::validate(&cfg.model, &data);
    for issue in &report.issues {
        eprintln!("{:?}: {}", issue.severity, issue.message);
    }
    report.into_result()?;
    let result = fit(&cfg.model, &data, cfg.quadrature, &cfg.fit_options())?;
    print!("{}", fit_table(&result));
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir).map_err(|e| Failure::Validation(format!("{}: {e}", dir.display())))?;
        let file = ResultFile {
            software: format!("conmix {}", env!("CARGO_PKG_VERSION")),
            seed: cfg.seed,
            config: cfg.clone(),
            result: result.clone(),
        };
        write_json(&dir.join("result.json"), &file)?;
    }
    if result.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("warning: optimizer did not converge; results were still written");
        Ok(EXIT_NOT_CONVERGED)
    }
}

/// Text table of a fit.
pub fn fit_table(r: &FitResult) -> String {
    let mut s = String::new();
    let w = r.names.iter().map(String::len).max().unwrap_or(0).max(9);
    let _ = writeln!(s, "{:<w$}  {:>12}  {:>12}", "parameter", "estimate", "s.e.");
    for ((n, e), se) in r.names.iter().zip(&r.estimates).zip(&r.se) {
        let _ = writeln!(s, "{n:<w$}  {e:>12.6}  {se:>12.6}");
    }
    let _ = writeln!(s, "loglik {:.6}  -2loglik {:.6}", r.loglik, r.minus2ll);
    let _ = writeln!(
        s,
        "converged {}  iterations {}  gradient {:.3e}{}",
        r.converged,
        r.iterations,
        r.gradient_norm,
        if r.se_reliable { "" } else { "  (standard errors unreliable)" }
    );
    s
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Numeric(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn load_params(spec: &ModelSpec, arg: &str) -> Result<Params, Failure> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| Failure::Validation(format!("{arg}: {e}")))?
    };
    let values: HashMap<String, f64> =
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("parameters: {e}")))?;
    Ok(params_from_natural(spec, &values)?)
}

fn cmd_simulate(a: SimArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(&a.config)?;
    let mut design = cfg
        .simulation
        .clone()
        .ok_or_else(|| Failure::Validation("the configuration has no `simulation` section".into()))?;
    if let Some(s) = a.seed {
        design.seed = s;
    }
    let params = load_params(&cfg.model, &a.params)?;
    let data = conmix::simulate(&cfg.model, &params, &design)?;
    let out = a.out.or(cfg.data).ok_or_else(|| Failure::Usage("no output path: pass --out".into()))?;
    write_dataset(&out, &data)?;
    println!("wrote {} rows for {} subjects to {}", data.rows().len(), data.n_subjects(), out.display());
    Ok(())
}

/// Parse `a..b`, `a..b..step` or `t1,t2,...`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::Usage(format!("invalid grid `{s}`"));
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
    let grid: Vec<f64> = if s.contains("..") {
        let parts: Vec<&str> = s.split("..").collect();
        let (lo, hi, step) = match parts.as_slice() {
            [a, b] => (num(a)?, num(b)?, 1.0),
            [a, b, c] => (num(a)?, num(b)?, num(c)?),
            _ => return Err(bad()),
        };
        if !(step > 0.0) || hi < lo {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| lo + i as f64 * step).collect()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if grid.len() < 2 {
        return Err(Failure::Usage("the grid needs at least two time points".into()));
    }
    Ok(grid)
}

#[derive(Debug, Serialize)]
struct GridReport {
    times: Vec<f64>,
    mean: Vec<f64>,
    variance: Vec<f64>,
    correlation: Vec<Vec<f64>>,
    max: f64,
    max_pair: (f64, f64),
    min: f64,
    min_pair: (f64, f64),
    approximate: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    raw: Vec<Vec<f64>>,
}

fn cmd_grid(a: GridArgs, corr_only: bool) -> Result<(), Failure> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let (spec, params) = match (&a.params, &a.result) {
        (Some(p), None) => {
            let cfg = cfg.as_ref().ok_or_else(|| Failure::Usage("--params needs --config".into()))?;
            (cfg.model.clone(), load_params(&cfg.model, p)?)
        }
        (None, Some(r)) => {
            let file = ResultFile::load(r)?;
            let params = file.result.params()?;
            (file.result.spec, params)
        }
        _ => return Err(Failure::Usage("pass exactly one of --params or --result".into())),
    };
    let mut profile = cfg.and_then(|c| c.profile).unwrap_or_else(|| TimeProfile::new("time"));
    if let Some(t) = a.time_column {
        profile.time_column = t;
    }
    for kv in &a.at {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("expected NAME=VALUE, got `{kv}`")))?;
        let v: f64 = v.parse().map_err(|_| Failure::Usage(format!("invalid value in `{kv}`")))?;
        profile.fixed.insert(k.to_string(), v);
    }
    let grid = parse_grid(&a.grid)?;
    let ext = correlation_extremes(&spec, &params, &profile, &grid)?;
    let rows: Vec<HashMap<String, f64>> = grid
        .iter()
        .map(|&t| {
            let mut m = profile.fixed.clone();
            m.insert(profile.time_column.clone(), t);
            m
        })
        .collect();
    let (x, z): (DMatrix<f64>, DMatrix<f64>) = profile_designs(&spec, &rows)?;
    let m = model_moments(&spec, &params, &x, &z)?;
    let raw = match a.raw {
        Some(k) if !corr_only => raw_moments(&spec, &params, &x, &z, k)?,
        _ => Vec::new(),
    };
    let report = GridReport {
        times: grid.clone(),
        mean: m.mean.clone(),
        variance: (0..grid.len()).map(|j| m.variance(j)).collect(),
        correlation: ext.matrix.clone(),
        max: ext.max,
        max_pair: ext.max_pair,
        min: ext.min,
        min_pair: ext.min_pair,
        approximate: ext.approximate,
        raw,
    };
    let mut s = String::new();
    if !corr_only {
        let _ = writeln!(s, "{:>8}  {:>12}  {:>12}", "time", "mean", "variance");
        for j in 0..grid.len() {
            let _ = write!(s, "{:>8}  {:>12.6}  {:>12.6}", grid[j], report.mean[j], report.variance[j]);
            for v in report.raw.get(j).into_iter().flatten() {
                let _ = write!(s, "  {v:>12.6e}");
            }
            s.push('\n');
        }
    } else {
        let _ = writeln!(s, "{:>8}  {:>8}  {:>10}", "t", "s", "corr");
        for j in 0..grid.len() {
            for k in j + 1..grid.len() {
                let _ = writeln!(s, "{:>8}  {:>8}  {:>10.4}", grid[j], grid[k], report.correlation[j][k]);
            }
        }
    }
    let _ = writeln!(s, "largest correlation  {:.4} at ({}, {})", ext.max, ext.max_pair.0, ext.max_pair.1);
    let _ = writeln!(s, "smallest correlation {:.4} at ({}, {})", ext.min, ext.min_pair.0, ext.min_pair.1);
    if ext.approximate {
        let _ = writeln!(s, "(approximate: logit moments via the probit bridge)");
    }
    print!("{s}");
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn parse_kind(s: &str) -> Result<ComparisonKind, Failure> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Failure::Usage(format!("unknown comparison kind `{s}`")))
}

/// Text table of nested comparisons.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<20}  {:<20}  {:<24}  {:>10}  {:>10}", "null model", "alternative", "test", "statistic", "p");
    for r in rows {
        let test = match (r.kind, &r.component) {
            (ComparisonKind::WaldVarianceBoundary, Some(c)) => format!("wald boundary [{c}]"),
            (ComparisonKind::WaldVarianceBoundary, None) => "wald boundary".into(),
            (ComparisonKind::LrBoundary, _) => "lr boundary".into(),
            (ComparisonKind::LrInterior, _) => "lr".into(),
        };
        let p = if r.p < 1e-4 { "<0.0001".to_string() } else { format!("{:.4}", r.p) };
        let _ = writeln!(s, "{:<20}  {:<20}  {:<24}  {:>10.4}  {:>10}", r.null_model, r.alt_model, test, r.statistic, p);
    }
    s
}

fn cmd_compare(a: CompareArgs) -> Result<(), Failure> {
    let mut fits = Vec::new();
    for f in &a.fits {
        let (label, path) = f.split_once('=').ok_or_else(|| Failure::Usage(format!("expected LABEL=PATH, got `{f}`")))?;
        fits.push((label.to_string(), ResultFile::load(Path::new(path))?.result));
    }
    let mut nesting = Vec::new();
    for n in &a.nest {
        let parts: Vec<&str> = n.split(':').collect();
        let [null, alt, kind] = parts.as_slice() else {
            return Err(Failure::Usage(format!("expected NULL:ALT:KIND, got `{n}`")));
        };
        nesting.push((null.to_string(), alt.to_string(), parse_kind(kind)?));
    }
    let rows = compare_models(&fits, &nesting)?;
    print!("{}", comparison_table(&rows));
    if let Some(out) = &a.out {
        write_json(out, &rows)?;
    }
    Ok(())
}
