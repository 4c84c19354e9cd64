use std::process::ExitCode;

use bbe_core::cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bbe: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
