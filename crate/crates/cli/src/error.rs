//! CLI failures bucketed by exit code: 1 usage, 2 data, 3 numeric.

use std::path::Path;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed or contradictory configuration.
    Usage(String),
    /// Missing or malformed input files, unwritable outputs.
    Data(String),
    /// A computation left the finite range.
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<amrpn_core::error::Error> for CliError {
    fn from(e: amrpn_core::error::Error) -> Self {
        use amrpn_core::error::Error;
        match e {
            Error::NonFinite { .. } | Error::NumericFailure { .. } => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Wraps an io::Error with the path it concerns, which std leaves out.
pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
