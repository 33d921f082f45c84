//! Command-line front end for the `mrdose` library: simulate datasets
//! from the benchmark design, estimate average potential outcomes on a
//! CSV, and reproduce the benchmark replication study.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mrdose::data::{load_csv_with_q, write_csv, Dataset};
use mrdose::estimators::{ate, ApoEstimate, EstimatorSpec};
use mrdose::family::ModelFamily;
use mrdose::report::{render_csv, render_json, render_table};
use mrdose::sim::{
    benchmark_estimators, compare_reference, evaluate_cell, fit_models, run_experiment,
    simulate_dataset, DgpSpec, ExperimentConfig, FittedSet, ReferenceComparison, DEFAULT_BASE_SEED,
};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "mrdose",
    version,
    about = "Doubly and multiply robust estimation of average potential outcomes \
             for multivalued treatments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset from the benchmark design and write it as CSV
    Simulate(SimulateArgs),
    /// Fit a model family on a dataset CSV and report APO and ATE estimates
    Estimate(EstimateArgs),
    /// Run the benchmark replication study and compare against reference results
    #[command(name = "reproduce-table1")]
    ReproduceTable1(ReproduceArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Sample size (at least 1)
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// RNG seed
    #[arg(long, default_value_t = DEFAULT_BASE_SEED)]
    seed: u64,
    /// Output CSV path (columns y,d,x1)
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input dataset CSV with header y,d,x1,...,xp
    data: PathBuf,
    /// Model-family JSON file (defaults to the built-in benchmark family)
    #[arg(long)]
    models: Option<PathBuf>,
    /// Comma-separated estimator names, e.g. DR_1010,MR_1111
    /// (defaults to the nine benchmark estimators)
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    /// Number of treatment levels, overriding the inferred 1 + max(d)
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    q: Option<u64>,
    /// Output format
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write the report here instead of stdout
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Exit nonzero if any estimator cell fails
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Monte Carlo replications
    #[arg(
        long,
        default_value_t = 200,
        conflicts_with = "full",
        value_parser = clap::value_parser!(u64).range(1..)
    )]
    replications: u64,
    /// Full-scale protocol: 1000 replications
    #[arg(long)]
    full: bool,
    /// Sample size per replication
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Base seed; replication streams are derived from it
    #[arg(long, default_value_t = DEFAULT_BASE_SEED)]
    seed: u64,
    /// Worker threads for the replication pool (defaults to all cores)
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    /// Model-family JSON file overriding the built-in benchmark family
    #[arg(long)]
    models: Option<PathBuf>,
    /// Output format
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write the report here instead of stdout
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Exit nonzero on failed cells or a failed reference comparison
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

/// Errors that should surface as usage errors (exit code 2), matching
/// how clap reports flag-level problems.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::ReproduceTable1(args) => cmd_reproduce(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let dgp = DgpSpec::benchmark(args.n as usize);
    let ds = simulate_dataset(&dgp, args.seed)?;
    write_csv(&ds, &args.output).with_context(|| format!("writing {}", args.output.display()))?;
    eprintln!(
        "wrote {} units ({} treatment levels) to {}",
        ds.n(),
        ds.q_levels(),
        args.output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_family(path: Option<&Path>) -> Result<ModelFamily> {
    match path {
        None => Ok(ModelFamily::benchmark()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ModelFamily::from_json(&text)
                .with_context(|| format!("parsing model family {}", p.display()))
        }
    }
}

fn parse_estimators(names: &[String], family: &ModelFamily) -> Result<Vec<EstimatorSpec>> {
    names
        .iter()
        .map(|name| {
            EstimatorSpec::parse(name, family.num_propensity(), family.num_outcome())
                .map_err(|e| UsageError(e.to_string()).into())
        })
        .collect()
}

/// Everything `estimate` produces for one dataset, kept in one place so
/// the three output formats render the same facts.
struct EstimateReport {
    n: usize,
    q_levels: usize,
    estimates: Vec<Vec<Option<ApoEstimate>>>,
    ates: Vec<Vec<Option<f64>>>,
    failures: Vec<(String, usize, String)>,
    names: Vec<String>,
}

fn build_estimate_report(
    ds: &Dataset,
    specs: &[EstimatorSpec],
    fitted: &FittedSet,
) -> Result<EstimateReport> {
    let q = ds.q_levels();
    let mut estimates = Vec::with_capacity(specs.len());
    let mut ates = Vec::with_capacity(specs.len());
    let mut failures = Vec::new();
    for spec in specs {
        let mut row: Vec<Option<ApoEstimate>> = Vec::with_capacity(q);
        for level in 0..q {
            match evaluate_cell(spec, ds, fitted, level) {
                Ok(est) => row.push(Some(est)),
                Err(message) => {
                    failures.push((spec.name(), level, message));
                    row.push(None);
                }
            }
        }
        let base = row[0].as_ref();
        let mut ate_row: Vec<Option<f64>> = vec![None; q];
        if let Some(base) = base {
            for level in 1..q {
                if let Some(est) = row[level].as_ref() {
                    ate_row[level] = Some(ate(est, base)?);
                }
            }
        }
        estimates.push(row);
        ates.push(ate_row);
    }
    Ok(EstimateReport {
        n: ds.n(),
        q_levels: q,
        estimates,
        ates,
        failures,
        names: specs.iter().map(|s| s.name()).collect(),
    })
}

fn estimate_json(report: &EstimateReport, fitted: &FittedSet) -> Result<String> {
    let estimates: Vec<serde_json::Value> = report
        .estimates
        .iter()
        .flatten()
        .flatten()
        .map(serde_json::to_value)
        .collect::<std::result::Result<_, _>>()?;
    let ates: Vec<serde_json::Value> = report
        .names
        .iter()
        .zip(&report.ates)
        .flat_map(|(name, row)| {
            row.iter().enumerate().filter_map(move |(level, value)| {
                value.map(
                    |v| json!({ "estimator": name, "level": level, "vs_level": 0, "value": v }),
                )
            })
        })
        .collect();
    let failures: Vec<serde_json::Value> = report
        .failures
        .iter()
        .map(|(name, level, message)| {
            json!({ "estimator": name, "level": level, "message": message })
        })
        .collect();
    let value = json!({
        "n": report.n,
        "q_levels": report.q_levels,
        "estimates": estimates,
        "ates_vs_level0": ates,
        "failures": failures,
        "model_fit_errors": { "ps": fitted.ps_errors, "or": fitted.or_errors },
    });
    Ok(serde_json::to_string_pretty(&value)?)
}

fn estimate_csv(report: &EstimateReport) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "estimator",
        "level",
        "apo",
        "ate_vs_level0",
        "sample_size",
        "clamp_events",
        "message",
    ])?;
    for (r, name) in report.names.iter().enumerate() {
        for level in 0..report.q_levels {
            match report.estimates[r][level].as_ref() {
                Some(est) => {
                    let ate_cell =
                        report.ates[r][level].map(|v| format!("{v}")).unwrap_or_default();
                    writer.write_record([
                        name.as_str(),
                        &level.to_string(),
                        &format!("{}", est.value),
                        &ate_cell,
                        &est.sample_size.to_string(),
                        &est.diagnostics.clamp_events.to_string(),
                        "",
                    ])?;
                }
                None => {
                    let message = report
                        .failures
                        .iter()
                        .find(|(n, l, _)| n == name && *l == level)
                        .map(|(_, _, m)| m.as_str())
                        .unwrap_or("failed");
                    writer.write_record([
                        name.as_str(),
                        &level.to_string(),
                        "",
                        "",
                        "",
                        "",
                        message,
                    ])?;
                }
            }
        }
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}

fn estimate_table(report: &EstimateReport) -> String {
    let name_width = report.names.iter().map(|n| n.len()).max().unwrap_or(9).max(9);
    let mut out = String::new();
    let header = |out: &mut String, title: &str, from_level: usize| {
        out.push_str(&format!("{title}\n{:name_width$}", ""));
        for level in from_level..report.q_levels {
            out.push_str(&format!(" {:>8}", format!("level {level}")));
        }
        out.push('\n');
    };
    let cell = |value: Option<f64>| match value {
        Some(v) => format!(" {v:>8.3}"),
        None => format!(" {:>8}", "-"),
    };

    header(&mut out, "APO estimates", 0);
    for (r, name) in report.names.iter().enumerate() {
        out.push_str(&format!("{name:name_width$}"));
        for level in 0..report.q_levels {
            out.push_str(&cell(report.estimates[r][level].as_ref().map(|e| e.value)));
        }
        out.push('\n');
    }

    header(&mut out, "\nATE vs level 0", 1);
    for (r, name) in report.names.iter().enumerate() {
        out.push_str(&format!("{name:name_width$}"));
        for level in 1..report.q_levels {
            out.push_str(&cell(report.ates[r][level]));
        }
        out.push('\n');
    }

    if !report.failures.is_empty() {
        out.push_str("\nfailed cells\n");
        for (name, level, message) in &report.failures {
            out.push_str(&format!("{name} level {level}: {message}\n"));
        }
    }
    out
}

fn cmd_estimate(args: EstimateArgs) -> Result<ExitCode> {
    let ds = load_csv_with_q(&args.data, args.q.map(|q| q as usize))
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let family = load_family(args.models.as_deref())?;
    let specs = if args.estimators.is_empty() {
        if (family.num_propensity(), family.num_outcome()) != (2, 2) {
            return Err(UsageError(format!(
                "the default estimator list assumes 2 propensity and 2 outcome models; \
                 this family has {} and {}, so pass --estimators explicitly",
                family.num_propensity(),
                family.num_outcome()
            ))
            .into());
        }
        benchmark_estimators()
    } else {
        parse_estimators(&args.estimators, &family)?
    };

    let fitted = fit_models(&ds, &family, &specs);
    let report = build_estimate_report(&ds, &specs, &fitted)?;
    let rendered = match args.format {
        Format::Json => estimate_json(&report, &fitted)?,
        Format::Csv => estimate_csv(&report)?,
        Format::Table => estimate_table(&report),
    };
    emit(&rendered, args.output.as_deref())?;

    if args.strict && !report.failures.is_empty() {
        eprintln!("strict: {} estimator cells failed", report.failures.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn print_comparison(comparison: &ReferenceComparison) {
    match &comparison.skipped {
        Some(reason) => println!("reference comparison skipped: {reason}"),
        None => {
            println!("reference comparison:");
            for check in &comparison.checks {
                let flag = if check.passed { "PASS" } else { "FAIL" };
                println!("  {flag} {} -- {}", check.label, check.detail);
            }
            println!("verdict: {}", if comparison.passed { "PASS" } else { "FAIL" });
        }
    }
}

fn cmd_reproduce(args: ReproduceArgs) -> Result<ExitCode> {
    let family = load_family(args.models.as_deref())?;
    if (family.num_propensity(), family.num_outcome()) != (2, 2) {
        bail!(
            "the reproduction protocol runs the nine benchmark estimators and needs \
             a family with 2 propensity and 2 outcome models; this one has {} and {}",
            family.num_propensity(),
            family.num_outcome()
        );
    }
    let replications = if args.full { 1000 } else { args.replications as usize };
    let config = ExperimentConfig {
        dgp: DgpSpec::benchmark(args.n as usize),
        family,
        estimators: benchmark_estimators(),
        replications,
        base_seed: args.seed,
    };
    let report = match args.workers {
        Some(workers) => rayon::ThreadPoolBuilder::new()
            .num_threads(workers as usize)
            .build()
            .context("building the worker pool")?
            .install(|| run_experiment(&config)),
        None => run_experiment(&config),
    }?;

    let rendered = match args.format {
        Format::Json => render_json(&report),
        Format::Csv => render_csv(&report)?,
        Format::Table => render_table(&report),
    };
    emit(&rendered, args.output.as_deref())?;

    let comparison = compare_reference(&report);
    print_comparison(&comparison);

    let failed_cells: usize =
        report.estimators.iter().flat_map(|e| e.cells.iter()).map(|c| c.failures).sum();
    if failed_cells > 0 {
        println!("note: {failed_cells} estimator cells failed across replications");
    }

    let comparison_failed = comparison.skipped.is_none() && !comparison.passed;
    if args.strict && (failed_cells > 0 || comparison_failed) {
        eprintln!("strict: failed cells or reference comparison failure");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn emit(rendered: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(path) => {
            fs::write(path, rendered).with_context(|| format!("writing {}", path.display()))?
        }
        None => {
            print!("{rendered}");
            if !rendered.ends_with('\n') {
                println!();
            }
        }
    }
    Ok(())
}
