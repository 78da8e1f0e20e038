//! `nli` command-line tool.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime error.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    // clap reports malformed invocations itself, with exit code 2
    let cli = args::Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
