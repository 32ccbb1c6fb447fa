use std::process::ExitCode;

use clap::Parser;
use gaplm_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gaplm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
