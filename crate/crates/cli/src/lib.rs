//! `stab`: the experiment pipelines of the stabfi library behind one binary.
//!
//! Every command that writes an artifact also writes `<out>.manifest.json`
//! recording the full argument vector, seeds and file digests, so that
//! `stab replay --manifest <file>` can rerun it and check the outputs are
//! byte-identical.

mod args;
mod commands;
mod config;
mod manifest;
mod merge;
mod report;

use std::fmt;

use clap::Parser;

pub use args::Cli;
pub use manifest::{FileDigest, RunManifest, MANIFEST_FORMAT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<stabfi::Error> for CliError {
    fn from(e: stabfi::Error) -> Self {
        use stabfi::Error as E;
        let msg = e.to_string();
        match e {
            E::OutOfRange { .. } | E::TrainingFailure(_) | E::DegenerateAttack(_) => {
                CliError::Numerical(msg)
            }
            E::InvalidInput(_) | E::Format(_) => CliError::Usage(msg),
            E::Io(io) => io.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("malformed document: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Usage(format!("malformed table: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Worker count from `STAB_THREADS`; `None` means machine parallelism.
fn configure_threads() -> CliResult<usize> {
    let requested = match std::env::var("STAB_THREADS") {
        Ok(v) => Some(v.parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| {
            usage(format!(
                "STAB_THREADS must be a positive integer, got '{v}'"
            ))
        })?),
        Err(_) => None,
    };
    if let Some(n) = requested {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(rayon::current_num_threads())
}

/// Parse and run one invocation; `argv[0]` is the program name.
pub fn execute(argv: &[String]) -> CliResult<()> {
    let argv = config::expand(argv)?;
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.render().to_string();
            let text = text.trim_end();
            return Err(usage(text.strip_prefix("error: ").unwrap_or(text)));
        }
    };
    let threads = configure_threads()?;
    commands::dispatch(&cli, &argv[1..], threads)
}

/// Run and translate the outcome into a process exit code.
pub fn run(argv: &[String]) -> i32 {
    match execute(argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
