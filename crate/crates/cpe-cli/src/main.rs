//! Command-line pipeline runner.
//!
//! Resolves a run configuration from defaults, an optional JSON config file
//! and flag overrides (flag > file > default), then dispatches one pipeline
//! stage. Exit codes: 0 on success, 2 for configuration errors, 3 for
//! missing or malformed artifacts, 4 for numeric failures.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use cpe_core::cpeflow::FlowVariant;
use cpe_core::error::CpeError;
use cpe_core::pipeline::{self, RunConfig, Solver};

#[derive(Parser)]
#[command(
    name = "cpe",
    version,
    about = "Causal posterior estimation pipeline: simulate, train, sample, evaluate"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Configuration source and field overrides shared by all subcommands.
#[derive(Args)]
struct Overrides {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Benchmark task name.
    #[arg(long, global = true)]
    task: Option<String>,

    /// Number of training simulations.
    #[arg(long, global = true)]
    n_train: Option<usize>,

    /// Flow family: continuous or discrete.
    #[arg(long, global = true)]
    variant: Option<String>,

    /// ODE solver for continuous flows: euler or rk45.
    #[arg(long, global = true)]
    solver: Option<String>,

    /// Comma-separated run seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Output root directory.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Posterior draws per run.
    #[arg(long, global = true)]
    n_samples: Option<usize>,

    /// Maximum training epochs.
    #[arg(long, global = true)]
    max_epochs: Option<usize>,

    /// Training minibatch size.
    #[arg(long, global = true)]
    batch_size: Option<usize>,

    /// Adam learning rate.
    #[arg(long, global = true)]
    learning_rate: Option<f64>,

    /// Euler step count.
    #[arg(long, global = true)]
    euler_steps: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, CpeError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(task) = &self.task {
            config.task = task.clone();
        }
        if let Some(n) = self.n_train {
            config.n_train = n;
        }
        if let Some(variant) = &self.variant {
            config.variant = FlowVariant::from_str(variant)?;
        }
        if let Some(solver) = &self.solver {
            config.solver = Solver::from_str(solver)?;
        }
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        if let Some(output) = &self.output {
            config.output_dir = output.clone();
        }
        if let Some(n) = self.n_samples {
            config.n_samples = n;
        }
        if let Some(epochs) = self.max_epochs {
            config.train.max_epochs = epochs;
        }
        if let Some(batch) = self.batch_size {
            config.train.batch_size = batch;
        }
        if let Some(lr) = self.learning_rate {
            config.train.learning_rate = lr;
        }
        if let Some(steps) = self.euler_steps {
            config.euler_steps = steps;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate training datasets.
    Simulate,
    /// Train the flow on existing datasets.
    Train,
    /// Draw posterior samples from the trained flow.
    Sample,
    /// Build the slice-sampler reference posterior.
    Reference,
    /// Evaluate samples against the reference and rebuild result tables.
    Evaluate,
    /// Run all stages in order.
    Benchmark,
}

fn run(cli: &Cli) -> Result<(), CpeError> {
    let config = cli.overrides.resolve()?;
    log::info!(
        "run: task={} n_train={} variant={} solver={} hash={}",
        config.task,
        config.n_train,
        config.variant.tag(),
        config.solver_tag(),
        config.config_hash()
    );
    match cli.command {
        Command::Simulate => pipeline::cmd_simulate(&config),
        Command::Train => pipeline::cmd_train(&config),
        Command::Sample => pipeline::cmd_sample(&config),
        Command::Reference => pipeline::cmd_reference(&config),
        Command::Evaluate => pipeline::cmd_evaluate(&config),
        Command::Benchmark => pipeline::cmd_benchmark(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
