//! `metareg` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numeric failure. Diagnostics go
//! to stderr as `WARN <code> <detail>` lines; results go to `--out` (or stdout).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use metareg_core::io::{self, IoError, OutputFormat, ResultsTable};
use metareg_core::robust_cov::DEFAULT_ETA;
use metareg_core::sim::{run_grid, scenario_grid};
use metareg_core::{
    build_design_matrix, confidence_intervals, covariance, fit_meta_regression, validate_dataset, CovarianceVariant,
    MetaRegError, ModelFormula, RemlConfig,
};

#[derive(Parser)]
#[command(
    name = "metareg",
    version,
    about = "Mixed-effects meta-regression with robust confidence intervals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a meta-regression to a CSV dataset.
    Fit(FitArgs),
    /// Run a coverage simulation grid from a JSON configuration.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset with columns y,v (or mean_e,sd_e,n_e,mean_c,sd_c,n_c) plus moderators.
    #[arg(long)]
    data: PathBuf,
    /// Moderator columns entering the model.
    #[arg(long, value_delimiter = ',')]
    moderators: Vec<String>,
    /// Interaction terms written `a:b`.
    #[arg(long, value_delimiter = ',')]
    interactions: Vec<String>,
    /// Include an intercept column.
    #[arg(long)]
    intercept: bool,
    /// Center moderators at their sample means.
    #[arg(long)]
    center: bool,
    /// Covariance estimators.
    #[arg(long, value_delimiter = ',', default_value = "hc0,hc1,hc2,hc3,hc4,hc5,kh")]
    cov: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format; defaults to the extension of --out, else csv.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, env = "METAREG_WORKERS", default_value_t = 0)]
    workers: usize,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

/// Failure with its exit code.
enum Failure {
    Invalid(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Numeric(_) => 2,
        }
    }
}

impl From<MetaRegError> for Failure {
    fn from(e: MetaRegError) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.into())
        } else {
            Failure::Invalid(e.into())
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Domain(inner) => inner.into(),
            other => Failure::Invalid(other.into()),
        }
    }
}

fn warn(code: &str, detail: impl std::fmt::Display) {
    eprintln!("WARN {code} {detail}");
}

fn output_format(explicit: Option<Format>, out: Option<&Path>) -> OutputFormat {
    match explicit {
        Some(Format::Csv) => OutputFormat::Csv,
        Some(Format::Json) => OutputFormat::Json,
        None => out.map_or(OutputFormat::Csv, OutputFormat::from_path),
    }
}

fn emit(table: &ResultsTable, out: Option<&Path>, format: Option<Format>) -> Result<(), Failure> {
    let format = output_format(format, out);
    match out {
        Some(path) => io::write_results(table, path, format)?,
        None => {
            let text = io::render_results(table, format)?;
            std::io::stdout()
                .write_all(text.as_bytes())
                .context("writing results to stdout")
                .map_err(Failure::Invalid)?;
        }
    }
    Ok(())
}

fn parse_variants(names: &[String]) -> Result<Vec<CovarianceVariant>, Failure> {
    if names.is_empty() {
        return Err(Failure::Invalid(anyhow!(
            "at least one covariance estimator is required"
        )));
    }
    let mut out: Vec<CovarianceVariant> = Vec::new();
    for n in names {
        let v: CovarianceVariant = n.parse().map_err(|e: MetaRegError| Failure::Invalid(e.into()))?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

fn fit(args: FitArgs) -> Result<(), Failure> {
    let variants = parse_variants(&args.cov)?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Failure::Invalid(anyhow!("--level {} outside (0, 1)", args.level)));
    }
    let mut data = io::load_dataset_csv(&args.data)?;
    if args.center {
        data = data.centered();
    }
    let interactions = args
        .interactions
        .iter()
        .map(|t| {
            t.split_once(':')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| Failure::Invalid(anyhow!("interaction `{t}` is not of the form a:b")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let moderators: Vec<String> = args.moderators.iter().map(|m| m.trim().to_string()).collect();
    let formula = ModelFormula::from_names(data.moderator_names(), args.intercept, &moderators, &interactions)?;
    let design = build_design_matrix(&data, &formula)?;
    let report = validate_dataset(&data, &design);
    if !report.is_valid() {
        return Err(Failure::Invalid(anyhow!(
            "invalid dataset: k = {}, p = {}, non-positive variance {:?}, non-finite {:?}",
            report.k,
            report.p,
            report.nonpositive_variance,
            report.non_finite
        )));
    }

    let fit = fit_meta_regression(&design, &data.effects(), &data.variances(), &RemlConfig::default())?;
    if !fit.tau2.converged {
        warn(
            "reml_nonconvergence",
            format!("iterations={} tau2={}", fit.tau2.iterations, fit.tau2.tau2),
        );
    }
    let ids: Vec<&str> = data.studies().iter().map(|s| s.id.as_str()).collect();
    for &i in &fit.degenerate_leverage {
        warn(
            "degenerate_leverage",
            format!("study={} leverage={}", ids[i], fit.leverages[i]),
        );
    }

    let mut intervals = Vec::new();
    let mut failure: Option<Failure> = None;
    for v in variants {
        match covariance(&fit, v, DEFAULT_ETA).and_then(|c| confidence_intervals(&fit, &c, args.level)) {
            Ok(ci) => intervals.push(ci),
            Err(e) => {
                let detail = match &e {
                    MetaRegError::DegenerateLeverage { study, leverage } => {
                        format!("estimator={v} study={} leverage={leverage}", ids[*study])
                    }
                    other => format!("estimator={v} {other}"),
                };
                warn("estimator_failed", detail);
                failure.get_or_insert(e.into());
            }
        }
    }
    let names = design.column_names(data.moderator_names());
    emit(
        &ResultsTable::from_intervals(&names, &intervals),
        args.out.as_deref(),
        args.format,
    )?;
    failure.map_or(Ok(()), Err)
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut cfg = io::load_scenario_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let specs = scenario_grid(&cfg)?;
    let metrics = run_grid(&specs, args.workers)?;
    for m in &metrics {
        for w in m.warnings() {
            let (code, detail) = w.split_once(' ').unwrap_or((w.as_str(), ""));
            warn(code, detail);
        }
    }
    emit(&ResultsTable::from_metrics(&metrics), args.out.as_deref(), args.format)
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors; 2 is reserved for numeric failures here.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => fit(a),
        Command::Simulate(a) => simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Invalid(e) | Failure::Numeric(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
