//! Command-line surface of `perfdiff`.
//!
//! [`run`] parses arguments, merges an optional key-value configuration
//! file and dispatches to one of the commands. Reports land in
//! `<out>/reports/`, MIDI files in `<out>/midi/` and codecs in
//! `<out>/codecs/`.

use std::ffi::OsString;
use std::fmt;

use clap::{CommandFactory, FromArgMatches};

pub mod args;
mod commands;
mod config;
mod experiments;
mod inputs;

pub use args::{Cli, Command};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for bad arguments or input data.
pub const EXIT_INPUT: i32 = 1;
/// Exit status for I/O and internal failures.
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "{m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<perfdiff::Error> for CliError {
    fn from(e: perfdiff::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; messages go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse(args) {
        Ok(cli) => cli,
        Err(Parsed::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
        Err(Parsed::Cli(e)) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

enum Parsed {
    Clap(clap::Error),
    Cli(CliError),
}

fn parse<I, T>(args: I) -> Result<Cli, Parsed>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(&args).map_err(Parsed::Clap)?;
    if let Some(path) = matches.get_one::<std::path::PathBuf>("config") {
        let extra = config::file_arguments(&cmd, &matches, path).map_err(Parsed::Cli)?;
        if !extra.is_empty() {
            args.extend(extra);
            let matches = cmd.try_get_matches_from(&args).map_err(Parsed::Clap)?;
            return Cli::from_arg_matches(&matches).map_err(Parsed::Clap);
        }
    }
    Cli::from_arg_matches(&matches).map_err(Parsed::Clap)
}

/// Runs a parsed command inside a worker pool of `--jobs` threads.
pub fn execute(cli: Cli) -> CliResult<()> {
    let jobs = match cli.jobs {
        Some(0) => return Err(CliError::input("--jobs must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let ctx = commands::Context { seed: cli.seed, jobs };
    pool.install(|| match cli.command {
        Command::Extract(a) => commands::extract(&a),
        Command::Invert(a) => commands::invert(&a),
        Command::Render(a) => commands::render(&ctx, &a),
        Command::Transfer(a) => commands::transfer(&ctx, &a),
        Command::Evaluate(a) => experiments::evaluate(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::ProxyTrain(a) => commands::proxy_train(&ctx, &a),
        Command::ProxyPredict(a) => commands::proxy_predict(&a),
        Command::Sweep(a) => experiments::sweep(&ctx, &a),
    })
}
