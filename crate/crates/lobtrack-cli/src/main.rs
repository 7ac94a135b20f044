//! `lobtrack` command line: tabulates the trading boundaries, synthesizes
//! optimal policies for given initial states, and runs the library's
//! verification suites against its own closed forms.

mod boundary;
mod config;
mod solve;
mod verify;

use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// A failed run, sorted by exit code: 2 for invalid input, 3 for I/O
/// problems, 4 for numerical failures (synthesis errors, failed suites).
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Io(String),
    Numerical(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Io(m) | Failure::Numerical(m) => m,
        }
    }

    /// Prepends context (typically the offending state) to the message.
    pub fn prefixed(self, context: &str) -> Failure {
        match self {
            Failure::Validation(m) => Failure::Validation(format!("{context}: {m}")),
            Failure::Io(m) => Failure::Io(format!("{context}: {m}")),
            Failure::Numerical(m) => Failure::Numerical(format!("{context}: {m}")),
        }
    }
}

impl From<lobtrack::Error> for Failure {
    fn from(e: lobtrack::Error) -> Self {
        use lobtrack::Error;
        match e {
            Error::Invalid(_) | Error::Json(_) | Error::CsvParse { .. } => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

/// Tags an I/O error with the path it happened on.
pub fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(
    name = "lobtrack",
    version,
    about = "Optimal position tracking in a limit order book with transient impact",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate the buy and sell boundaries on a (tau, zeta) grid.
    Boundary(boundary::BoundaryArgs),
    /// Synthesize the optimal policy for one state and export it.
    Solve(solve::SolveArgs),
    /// Run verification suites and write a report.
    Verify(verify::VerifyArgs),
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Boundary(args) => boundary::run(&args),
        Command::Solve(args) => solve::run(&args),
        Command::Verify(args) => verify::run(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
