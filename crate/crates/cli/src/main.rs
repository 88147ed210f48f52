use std::process::ExitCode;

use circlecal_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(&cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("circlecal: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
