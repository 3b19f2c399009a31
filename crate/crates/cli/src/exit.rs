//! Stable process exit codes.

use std::fmt;

use tfmamba_core::Error;

pub const OK: u8 = 0;
pub const CONFIG: u8 = 2;
pub const IO: u8 = 3;
pub const MISMATCH: u8 = 4;
pub const NUMERIC: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: CONFIG, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: IO, message: message.into() }
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self { code: MISMATCH, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::ResourceLimit(_) | Error::Json(_) => CONFIG,
            Error::Io { .. } | Error::Format { .. } | Error::Csv(_) => IO,
            Error::LabelMismatch(_) | Error::ShapeMismatch(_) => MISMATCH,
            Error::NonFinite { .. } => NUMERIC,
        };
        Self { code, message: e.to_string() }
    }
}
