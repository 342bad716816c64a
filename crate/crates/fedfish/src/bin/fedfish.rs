//! Command-line front end: run one experiment, sweep an axis, or run the
//! self-verification suite. All heavy lifting lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedfish::harness::{run_experiment, run_sweep, ExperimentConfig, Report, SweepAxis};
use fedfish::verify::{run_acceptance, CheckStatus};

#[derive(Parser)]
#[command(
    name = "fedfish",
    about = "Deterministic federated-learning simulator with a label-inference attack",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config and write a CSV report
    /// (plus a JSON sidecar with full per-trial detail).
    Run(RunArgs),
    /// Re-run one config while varying a single axis; rows carry the axis
    /// value so the CSV is plot-ready.
    Sweep(SweepArgs),
    /// Run the acceptance suite: one PASS/WARN/FAIL line per check.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// CSV output path; defaults to the config's `output` field, then to
    /// `report.csv` next to the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Path to the base experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// Which field to vary: batch_size, clients, sigma, or theta.
    #[arg(long)]
    axis: String,
    /// Comma-separated list of axis values.
    #[arg(long)]
    values: String,
    /// CSV output path; defaults like `run`, with `-sweep` in the name.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Shrink the grids (fewer batch sizes, cohorts, and trials) for a fast
    /// smoke pass; the full suite is the actual acceptance gate.
    #[arg(long)]
    quick: bool,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => run_cmd(args),
        Command::Sweep(args) => sweep_cmd(args),
        Command::Verify(args) => verify_cmd(args),
    }
}

fn fail(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::FAILURE
}

fn out_path(cli: Option<PathBuf>, config: &ExperimentConfig, config_path: &PathBuf, suffix: &str) -> PathBuf {
    if let Some(p) = cli {
        return p;
    }
    if let Some(p) = &config.output {
        return p.clone();
    }
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    config_path.with_file_name(format!("{stem}{suffix}.csv"))
}

fn emit(report: &Report, path: &PathBuf) -> ExitCode {
    if let Err(e) = report.write(path) {
        return fail(e);
    }
    let clean = report.rows.iter().filter(|r| r.error.is_none()).count();
    println!(
        "{} rows ({} clean) in {:.1}s -> {} (+ JSON sidecar)",
        report.rows.len(),
        clean,
        report.total_wall_ms / 1e3,
        path.display()
    );
    for (value, acc) in report.mean_lnacc_by_axis() {
        match &report.axis {
            Some(axis) => println!("  {axis}={value}: mean label-count accuracy {acc:.4}"),
            None => println!("  mean label-count accuracy {acc:.4}"),
        }
    }
    ExitCode::SUCCESS
}

fn run_cmd(args: RunArgs) -> ExitCode {
    let config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let path = out_path(args.out, &config, &args.config, "");
    match run_experiment(&config) {
        Ok(report) => emit(&report, &path),
        Err(e) => fail(e),
    }
}

fn sweep_cmd(args: SweepArgs) -> ExitCode {
    let config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let axis = match SweepAxis::parse(&args.axis) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    let values: Result<Vec<f64>, _> = args
        .values
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect();
    let values = match values {
        Ok(v) if !v.is_empty() => v,
        Ok(_) => return fail("no axis values given"),
        Err(e) => return fail(format!("bad axis value: {e}")),
    };
    let path = out_path(args.out, &config, &args.config, "-sweep");
    match run_sweep(&config, axis, &values) {
        Ok(report) => emit(&report, &path),
        Err(e) => fail(e),
    }
}

fn verify_cmd(args: VerifyArgs) -> ExitCode {
    let outcomes = run_acceptance(args.quick, |o| println!("{}", o.line()));
    let fails = outcomes
        .iter()
        .filter(|o| o.status == CheckStatus::Fail)
        .count();
    let warns = outcomes
        .iter()
        .filter(|o| o.status == CheckStatus::Warn)
        .count();
    println!(
        "{} checks: {} passed, {warns} warned, {fails} failed",
        outcomes.len(),
        outcomes.len() - fails - warns
    );
    if fails == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
