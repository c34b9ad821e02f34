//! `protoseg` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, file or
//! format error, 3 numerical failure. Failures print one line
//! `error[<kind>]: <reason>` to standard error.

mod args;
mod commands;

use std::fmt;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{dump, resolve, Cli, Command, Options};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(protoseg::Error),
}

impl From<protoseg::Error> for CliError {
    fn from(e: protoseg::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        use protoseg::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                E::Config(_) => "config",
                E::Shape(_) => "shape",
                E::Contract(_) => "contract",
                E::EmptyMask { .. } => "empty-mask",
                E::Numerical { .. } => "numerical",
                E::Data { .. } => "data",
                E::Format(_) => "format",
                E::Io { .. } => "io",
            },
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(protoseg::Error::Config(_)) => 1,
            CliError::Core(protoseg::Error::Numerical { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn with_options<T: Options>(
    flags: &T,
    cli: &Cli,
    run: impl FnOnce(&T) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let options = resolve(flags, cli.config.as_deref())?;
    if cli.dump_config {
        print!("{}", dump(&options));
        return Ok(());
    }
    run(&options)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => with_options(a, cli, commands::generate),
        Command::Train(a) => with_options(a, cli, commands::train),
        Command::Eval(a) => with_options(a, cli, commands::eval),
        Command::Segment(a) => with_options(a, cli, commands::segment),
        Command::Report(a) => with_options(a, cli, commands::report),
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code())
        }
    }
}
