use std::process::ExitCode;

use cellgrow::cli::{run, Cli, EXIT_FAULT};
use clap::Parser;

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => ExitCode::from(run(cli)),
        Err(e) => {
            let _ = e.print();
            // Usage errors are faults; 2 is reserved for a generation-limited run.
            ExitCode::from(if e.use_stderr() { EXIT_FAULT } else { 0 })
        }
    }
}
