use std::io;
use std::process::ExitCode;

use clap::Parser;

use permfl_cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = io::stdout();
    match execute(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("permfl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
