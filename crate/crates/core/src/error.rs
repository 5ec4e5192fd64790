//! Error taxonomy shared across the workspace.
//!
//! Variants map onto the process exit codes used by the CLI:
//! configuration/shape problems exit with 2, I/O and file-format problems
//! with 3, and numeric problems with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or array dimensions do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A single configuration constraint is violated.
    #[error("config error: {0}")]
    Config(String),

    /// Full-config validation; carries every violated constraint.
    #[error("config validation failed:\n  {}", .0.join("\n  "))]
    ConfigViolations(Vec<String>),

    /// Input data could not be ingested (missing frames, undersized dirs, ...).
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A binary file did not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Non-finite values or other numeric breakdowns.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Values outside a documented domain (e.g. pixels outside [-1, 1]).
    #[error("range error: {0}")]
    Range(String),

    /// Normalization statistics are unusable (zero or non-finite std).
    #[error("stats error: {0}")]
    Stats(String),

    /// Invalid diffusion timestep schedule.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// An API contract was violated by the caller (e.g. an unfrozen feature net).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Config(_)
            | Error::ConfigViolations(_)
            | Error::Schedule(_)
            | Error::Contract(_) => 2,
            Error::Ingestion(_) | Error::Format(_) | Error::Io(_) => 3,
            Error::Numeric(_) | Error::Range(_) | Error::Stats(_) | Error::Tensor(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_documented_mapping() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Shape("x".into()).exit_code(), 2);
        assert_eq!(Error::Format("x".into()).exit_code(), 3);
        assert_eq!(Error::Ingestion("x".into()).exit_code(), 3);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 4);
        assert_eq!(Error::Range("x".into()).exit_code(), 4);
    }

    #[test]
    fn config_violations_list_every_constraint() {
        let err = Error::ConfigViolations(vec!["a".into(), "b".into()]);
        let msg = err.to_string();
        assert!(msg.contains("a") && msg.contains("b"));
    }
}
