use std::process::ExitCode;

use clap::Parser;
use tabmt::cli::{error_line, execute, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = tabmt::Error::InvalidArgument(e.to_string().trim().to_string());
            eprintln!("{}", error_line(&err));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
