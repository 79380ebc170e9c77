use std::process::ExitCode;

use clap::Parser;
use colln_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match colln_cli::run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("colln: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
