//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoatError>;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum CoatError {
    /// A caller-supplied argument violated a precondition.
    InvalidArgument(String),
    /// Sample generation exhausted its retry budget.
    GenerationFailure(String),
    /// A reasoning primitive was applied to an incompatible value.
    ChainExecution(String),
    /// No demonstration candidates exist for the predicted sample's concept.
    NoDemonstrations(String),
    /// A prompt did not match the expected grammar; `position` is a byte offset.
    Parse { position: usize, message: String },
    /// A dataset record could not be ingested; `line` is 1-based.
    Ingest { line: usize, message: String },
    /// A configuration file or run setup is inconsistent.
    Config(String),
    /// Training produced a non-finite loss or parameter.
    NonFinite(String),
    Io(std::io::Error),
}

impl fmt::Display for CoatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoatError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            CoatError::GenerationFailure(m) => write!(f, "generation failure: {m}"),
            CoatError::ChainExecution(m) => write!(f, "chain execution failed: {m}"),
            CoatError::NoDemonstrations(m) => write!(f, "no demonstrations available: {m}"),
            CoatError::Parse { position, message } => {
                write!(f, "parse error at byte {position}: {message}")
            }
            CoatError::Ingest { line, message } => write!(f, "line {line}: {message}"),
            CoatError::Config(m) => write!(f, "configuration error: {m}"),
            CoatError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            CoatError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CoatError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CoatError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CoatError {
    fn from(e: std::io::Error) -> Self {
        CoatError::Io(e)
    }
}

impl CoatError {
    /// Process exit code under the CLI contract: 1 for usage/config
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoatError::InvalidArgument(_) | CoatError::Config(_) => 1,
            _ => 2,
        }
    }
}
