use std::process::ExitCode;

use clap::Parser;

use pmo_cli::{run, Pmoctl};

fn main() -> ExitCode {
    let cli = Pmoctl::parse();
    ExitCode::from(run(cli.command, &mut std::io::stdout().lock()) as u8)
}
