//! Command-line front end: fit, simulate, benchmark, predict, metrics and edges.

mod benchmark;
mod commands;
mod input;

use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use vbfactor::error::VbError;

#[derive(Parser)]
#[command(name = "vbfactor", version, about = "Variational Bayes for sparse (multi-study) factor analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write the fitted state as JSON
    Fit(commands::FitCmd),
    /// Draw a random truth and data from it
    Simulate(commands::SimulateCmd),
    /// Run a grid of simulation scenarios and tabulate time and accuracy
    Benchmark(benchmark::BenchmarkCmd),
    /// Reconstruct observations from a fitted state, or cross-validate with --cv
    Predict(commands::PredictCmd),
    /// Score a fitted state against a simulation truth
    Metrics(commands::MetricsCmd),
    /// Export the shared covariance as a thresholded edge list
    Edges(commands::EdgesCmd),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fa,
    Msfa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Cavi,
    Svi,
}

/// Settings shared by every command that fits models.
#[derive(Args, Clone, Debug)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value = "cavi")]
    algo: Algo,
    /// Truncation of the (study-specific) loadings; a comma list gives one value per study
    #[arg(long, value_delimiter = ',', default_value = "5")]
    jstar: Vec<usize>,
    /// Truncation of the shared loadings
    #[arg(long, default_value_t = 5)]
    kstar: usize,
    /// Minibatch fraction; a comma list gives one value per study
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    batch: Vec<f64>,
    /// Forgetting rate of the step size
    #[arg(long, default_value_t = 0.75)]
    kappa: f64,
    /// Delay of the step size
    #[arg(long, default_value_t = 1.0)]
    delay: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Defaults to 5000 for CAVI and 10000 for SVI
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Center columns (per study)
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    center: bool,
    /// Scale columns to unit variance (per study)
    #[arg(long)]
    scale: bool,
    /// Keep variables whose variance is in this top fraction of at least one study
    #[arg(long)]
    filter_top_var: Option<f64>,
    /// Fraction of initial loadings set exactly to zero
    #[arg(long, default_value_t = 0.0)]
    init_sparsity: f64,
    /// Record the ELBO after every CAVI sweep
    #[arg(long)]
    track_elbo: bool,
}

#[derive(Args, Clone, Debug)]
pub struct OutputArgs {
    /// Write null instead of wall times so repeated runs give identical bytes
    #[arg(long)]
    omit_timing: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<VbError>()) {
        Some(VbError::Numerical(_) | VbError::Undefined(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(c) => commands::fit(c),
        Command::Simulate(c) => commands::simulate(c),
        Command::Benchmark(c) => benchmark::run(c),
        Command::Predict(c) => commands::predict(c),
        Command::Metrics(c) => commands::metrics(c),
        Command::Edges(c) => commands::edges(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_failures_exit_with_three() {
        let e = anyhow::Error::from(VbError::Numerical("x".into())).context("fitting");
        assert_eq!(exit_code(&e), 3);
        assert_eq!(exit_code(&VbError::Config("x".into()).into()), 2);
        assert_eq!(exit_code(&VbError::Dimension("x".into()).into()), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 2);
    }
}
