//! `macd` command-line driver: argument parsing, configuration layering and
//! report emission around the engine in `macd_core`.

pub mod args;
pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;

use clap::Parser;
use macd_core::backend::BackendError;
use macd_core::decode::DecodeError;
use macd_core::eval::EvalError;
use macd_core::optimize::OptimizeError;
use thiserror::Error;

/// Failures grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid or unresolvable configuration (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// Missing or unreadable inputs (exit 3).
    #[error("input error: {0}")]
    Input(String),
    /// The model backend failed (exit 4).
    #[error("backend error: {0}")]
    Backend(String),
    /// Anything else, including failures to write output (exit 1).
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Other(_) => 1,
            Self::Config(_) => 2,
            Self::Input(_) => 3,
            Self::Backend(_) => 4,
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::VocabMismatch { .. } | BackendError::EmptyQuery => Self::Input(e.to_string()),
            BackendError::InvalidSelector(_) | BackendError::NonDifferentiableConfig(_) => Self::Config(e.to_string()),
            _ => Self::Backend(e.to_string()),
        }
    }
}

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::Backend(b) => b.into(),
            OptimizeError::InvalidConfig(_) | OptimizeError::Compose(_) => Self::Config(e.to_string()),
            OptimizeError::Video(_) => Self::Input(e.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Backend(b) => b.into(),
            DecodeError::EmptyQuery => Self::Input(e.to_string()),
            DecodeError::InvalidConfig(_) | DecodeError::LengthMismatch(..) => Self::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backend(b) => b.into(),
            EvalError::Optimize(o) => o.into(),
            EvalError::Decode(d) => d.into(),
            EvalError::InvalidParameter(_) | EvalError::Compose(_) => Self::Config(e.to_string()),
            EvalError::Io(_)
            | EvalError::Video(_)
            | EvalError::Track(_)
            | EvalError::Json(_)
            | EvalError::EmptyInput
            | EvalError::MissingPrediction { .. } => Self::Input(e.to_string()),
            EvalError::Schema(_) => Self::Other(e.to_string()),
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run(argv: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("macd: {e}");
            e.exit_code()
        }
    }
}
