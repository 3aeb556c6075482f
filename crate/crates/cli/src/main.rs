use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = indiscal_cli::Cli::parse();
    match indiscal_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(2)
        }
    }
}
