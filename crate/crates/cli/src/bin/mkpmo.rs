use std::process::ExitCode;

use clap::Parser;

use pmo_cli::{run, Command, MkpmoArgs};

#[derive(Parser)]
#[command(
    name = "mkpmo",
    version,
    about = "Create and format a PMO device image"
)]
struct Cli {
    #[command(flatten)]
    args: MkpmoArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(run(Command::Mkpmo(cli.args), &mut std::io::stdout().lock()) as u8)
}
