use std::process::ExitCode;

use clap::Parser;
use modalmix::cli::{self, Cli};

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let parsed = Cli::parse();
    cli::configure_threads();
    match cli::execute(parsed, &argv) {
        Ok(outcome) => {
            println!("{}", outcome.message);
            if outcome.unresolved {
                ExitCode::from(cli::EXIT_UNRESOLVED as u8)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
