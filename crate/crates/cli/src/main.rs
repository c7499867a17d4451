use std::path::PathBuf;
use std::process::ExitCode;

use cdt_core::pipeline::{self, RunConfig};
use cdt_core::CdtError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdt", version, about = "Simulate, train, analyze and report CDT-II runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted world and its cells
    Simulate(StageArgs),
    /// Train on the simulated world
    Train(StageArgs),
    /// Run the attention, enrichment, network and attribution suites
    Analyze(StageArgs),
    /// Write the Markdown summary and plot-ready tables
    Report(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Run configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `out_dir` in the config. Must exist.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code(e: &CdtError) -> u8 {
    match e {
        CdtError::Config(_) => 2,
        CdtError::Leakage(_) => 3,
        CdtError::Mismatch { .. } => 4,
        CdtError::Missing(_) => 5,
        _ => 1,
    }
}

/// `CDT_THREADS` must be a positive integer when set. Every stage runs on one
/// thread, which satisfies any cap.
fn check_threads() -> Result<(), CdtError> {
    match std::env::var("CDT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(CdtError::Config(format!("CDT_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(()),
    }
}

fn load(args: &StageArgs) -> Result<RunConfig, CdtError> {
    let mut cfg = RunConfig::from_json_file(&args.config)?;
    if let Some(s) = args.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<PathBuf, CdtError> {
    check_threads()?;
    match cli.command {
        Command::Simulate(a) => pipeline::simulate(&load(&a)?),
        Command::Train(a) => pipeline::train(&load(&a)?),
        Command::Analyze(a) => pipeline::analyze(&load(&a)?),
        Command::Report(a) => pipeline::report(&load(&a)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            eprintln!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
