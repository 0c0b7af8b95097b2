use std::process::ExitCode;

use clap::Parser;
use octseg_cli::{run, Cli};

fn main() -> ExitCode {
    // usage errors exit with 2 from inside `parse`
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.error_line());
            ExitCode::FAILURE
        }
    }
}
