use std::process::ExitCode;

use clap::Parser;
use rome_harness::cli::{run, Cli, Outcome};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        // distinct from usage errors (2) and runtime errors (1)
        Ok(Outcome::Fail) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
