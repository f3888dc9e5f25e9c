use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use apqfluid::cli::{self, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "apqfluid", about = "Accumulating priority queue / tandem fluid queue simulators")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the priority queue and its maximum priority process
    SimulateApq(CommonArgs),
    /// Simulate the mapped tandem fluid queue
    SimulateTandem(CommonArgs),
    /// Run the statistical equivalence test battery over replications
    VerifyMapping(CommonArgs),
    /// Estimate the embedded stationary distribution from both models
    EstimateStationary(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the experiment config JSON
    config: PathBuf,
    /// Override the seed (takes precedence over APQFLUID_SEED and the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Run even if the queue is unstable
    #[arg(long)]
    allow_unstable: bool,
}

fn load(args: &CommonArgs) -> Result<ExperimentConfig, cli::CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let overrides = Overrides {
        seed: args.seed,
        output_dir: args.output_dir.clone(),
        allow_unstable: args.allow_unstable,
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn run() -> Result<(), cli::CliError> {
    let args = Args::parse();
    match &args.command {
        Command::SimulateApq(c) => cli::cmd_simulate_apq(&load(c)?),
        Command::SimulateTandem(c) => cli::cmd_simulate_tandem(&load(c)?),
        Command::VerifyMapping(c) => cli::cmd_verify_mapping(&load(c)?),
        Command::EstimateStationary(c) => cli::cmd_estimate_stationary(&load(c)?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
