use std::fmt;
use std::process::ExitCode;

/// Stable process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    /// I/O failures and anything not covered below.
    Failure = 1,
    /// Bad flags, bad config, invalid parameter values.
    Usage = 2,
    /// Training produced a non-finite loss or parameter.
    NonFinite = 3,
    UnreadableImage = 4,
    MissingIndexEntry = 5,
    GroundTruthMismatch = 6,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        Self {
            exit,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Exit::Usage, message)
    }

    pub fn failure(message: impl fmt::Display) -> Self {
        Self::new(Exit::Failure, message.to_string())
    }

    pub fn code(&self) -> ExitCode {
        ExitCode::from(self.exit as u8)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}
