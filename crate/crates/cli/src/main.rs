//! `knnclean` command-line front end.
//!
//! Exit status: 0 success, 1 configuration error, 2 data error, 3 internal
//! error.

mod commands;

use std::process::ExitCode;

use clap::Parser;
use knnclean::ErrorKind;

use crate::commands::{Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Data => 2,
                ErrorKind::Internal => 3,
            })
        }
    }
}

impl CliError {
    fn kind(&self) -> ErrorKind {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => ErrorKind::Config,
            CliError::Internal(_) => ErrorKind::Internal,
        }
    }
}
