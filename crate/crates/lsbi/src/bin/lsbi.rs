use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = lsbi::cli::Cli::parse();
    match lsbi::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_status() as u8)
        }
    }
}
