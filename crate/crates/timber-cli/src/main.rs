//! `timber` — checkpoint surgery for paired Base/Instruct models.
//!
//! Subcommands: `analyze` (eRank diagnostics), `refine` (write a refined
//! checkpoint), `passk` (Pass@k/Mean@k over rollout logs), `compare` (join
//! layer reports from prior runs).

mod args;
mod commands;
mod config;
mod manifest;
mod report;

use clap::Parser;

/// Exit-code contract: 0 success, 1 runtime/numerical failure,
/// 2 usage/input error.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<timber_core::Error> for CliError {
    fn from(err: timber_core::Error) -> Self {
        use timber_core::Error;
        match err {
            Error::Input(_) | Error::Domain(_) => CliError::Input(err.to_string()),
            _ => CliError::Runtime(err.to_string()),
        }
    }
}

fn main() {
    let cli = args::Cli::parse();
    let result = match cli.command {
        args::Command::Analyze(a) => commands::analyze::run(a),
        args::Command::Refine(a) => commands::refine::run(a),
        args::Command::Passk(a) => commands::passk::run(a),
        args::Command::Compare(a) => commands::compare::run(a),
    };
    if let Err(err) = result {
        eprintln!("error: {}", err.message());
        std::process::exit(err.exit_code());
    }
}
