mod commands;
mod config_load;
mod io;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "vstab",
    about = "Strictly causal online video stabilization",
    version
)]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config value by dotted path, e.g. observer.nms_radius=4.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed for all stochastic components.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Execution mode.
    #[arg(long, global = true, value_parser = ["pipeline", "sequential"])]
    mode: Option<String>,

    /// Write per-frame trajectory lines `frame,row,col,ox,oy,sx,sy`.
    #[arg(long, global = true, value_name = "PATH")]
    dump_trajectories: Option<PathBuf>,

    /// Write per-frame grid motion lines `frame,row,col,dx,dy`.
    #[arg(long, global = true, value_name = "PATH")]
    dump_grid: Option<PathBuf>,

    /// Directory of Middlebury `.flo` files named `<t>.flo`, replacing the
    /// built-in dense flow.
    #[arg(long, global = true, value_name = "PATH")]
    flow_dir: Option<PathBuf>,

    /// Keypoint import file with `frame,x,y,score,detector` lines.
    #[arg(long, global = true, value_name = "PATH")]
    keypoints: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stabilize a frame sequence.
    Stabilize(commands::StabilizeArgs),
    /// Evaluate stabilization metrics between an input and output sequence.
    Metrics(commands::MetricsArgs),
    /// Measure pipeline throughput against the closed-form model.
    Bench(commands::BenchArgs),
    /// Generate a synthetic sequence with ground-truth sidecar.
    Synth(commands::SynthArgs),
}

/// Process exit codes: 2 config, 3 I/O, 4 sequence-length mismatch.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    LengthMismatch(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::LengthMismatch(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Io(m)
            | CliError::LengthMismatch(m)
            | CliError::Other(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config_load::load(
        cli.config.as_deref(),
        &cli.set,
        cli.seed,
        cli.mode.as_deref(),
    )?;
    let aux = commands::AuxInputs {
        dump_trajectories: cli.dump_trajectories,
        dump_grid: cli.dump_grid,
        flow_dir: cli.flow_dir,
        keypoints: cli.keypoints,
    };
    match cli.command {
        Command::Stabilize(args) => commands::stabilize(&cfg, &aux, args),
        Command::Metrics(args) => commands::metrics(&cfg, args),
        Command::Bench(args) => commands::bench(&cfg, args),
        Command::Synth(args) => commands::synth(args),
    }
}
