//! `depthattack` — generate synthetic scenes, train the toy nets, run
//! attacks and universal perturbations, and aggregate the results.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Unreadable, unwritable or malformed data (exit 2).
    Data(String),
    /// Non-finite values or divergence (exit 3).
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<depthattack_core::Error> for CliError {
    fn from(e: depthattack_core::Error) -> Self {
        use depthattack_core::Error as E;
        match e {
            E::Config(m) => CliError::Usage(m),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "depthattack", version, about = "Adversarial attacks on toy monocular depth networks")]
struct Cli {
    /// JSON file with default values for the command's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log verbosity on stderr: error, warn, info or debug.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(commands::GenArgs),
    /// Check every sample of a dataset against its invariants.
    Verify(commands::VerifyArgs),
    /// Train a depth or segmentation network.
    Train(commands::TrainArgs),
    /// Run per-image attacks and write per-image metrics.
    Attack(commands::AttackArgs),
    /// Train and evaluate universal perturbations.
    Universal(commands::UniversalArgs),
    /// Aggregate metric CSVs into a markdown report.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .format_target(false)
        .target(env_logger::Target::Stderr)
        .init();
    let file = match config::load_file(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(file, a),
        Command::Verify(a) => commands::verify(file, a),
        Command::Train(a) => commands::train(file, a),
        Command::Attack(a) => commands::attack(file, a),
        Command::Universal(a) => commands::universal(file, a),
        Command::Report(a) => report::run(file, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("error: {}", e.message());
    ExitCode::from(e.exit_code())
}
