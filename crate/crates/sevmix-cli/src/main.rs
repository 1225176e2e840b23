//! Batch front end for the composite severity model: simulation, fitting,
//! penalty tuning, coefficient adjustment, collapse-and-refit, confidence
//! intervals, distributional benchmarks, and plot-data diagnostics.
//!
//! Exit codes: 0 success, 2 parse errors (flags or file contents), 3 fit
//! failures, 4 IO errors. Failures print one machine-readable JSON object to
//! stderr.

mod ops;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "sevmix", version, about = "Composite severity regression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw covariates and responses from a known model.
    Simulate(ops::SimulateArgs),
    /// Fit the composite model at a fixed penalty rate.
    Fit(ops::FitArgs),
    /// Score a penalty grid and select rates per model part.
    Tune(ops::TuneArgs),
    /// Merge and zero near-duplicate coefficient rows of a fitted model.
    Adjust(ops::AdjustArgs),
    /// Refit an adjusted model on its collapsed design.
    Refit(ops::RefitArgs),
    /// Confidence intervals for a fitted model (Wald or resampling).
    Bootstrap(ops::BootstrapArgs),
    /// Classical severity fits for a model-comparison table.
    Benchmark(ops::BenchmarkArgs),
    /// Plot-data CSVs: density, Q-Q, log-log survival, mean excess.
    Diagnose(ops::DiagnoseArgs),
    /// Pilot fit, tune, penalized fit, adjust, collapse-refit, intervals.
    Pipeline(ops::PipelineArgs),
}

fn dispatch(cli: &Cli) -> Result<(), run::CliError> {
    match &cli.command {
        Command::Simulate(a) => ops::cmd_simulate(a),
        Command::Fit(a) => ops::cmd_fit(a),
        Command::Tune(a) => ops::cmd_tune(a),
        Command::Adjust(a) => ops::cmd_adjust(a),
        Command::Refit(a) => ops::cmd_refit(a),
        Command::Bootstrap(a) => ops::cmd_bootstrap(a),
        Command::Benchmark(a) => ops::cmd_benchmark(a),
        Command::Diagnose(a) => ops::cmd_diagnose(a),
        Command::Pipeline(a) => ops::cmd_pipeline(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_default_env().format_timestamp(None).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
