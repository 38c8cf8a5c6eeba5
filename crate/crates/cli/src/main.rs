mod args;
mod commands;
mod report;
mod source;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// A bad flag value detected after parsing; exits with the usage status.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<mci::Error>() {
        Some(mci::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let result = match &cli.command {
        Command::Measure(a) => commands::measure(a, argv),
        Command::Train(a) => commands::train(a, argv),
        Command::Sweep(a) => commands::sweep(a, argv),
        Command::Generate(a) => commands::generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            if code == EXIT_USAGE {
                eprintln!("run `mci --help` for usage");
            }
            ExitCode::from(code)
        }
    }
}
