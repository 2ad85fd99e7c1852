use std::process::ExitCode;

use clap::Parser;
use egobench_cli::args::Cli;
use egobench_cli::run;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(status) => ExitCode::from(status.exit_code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
