use std::fmt;

use frc_core::ErrorClass;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_DEGENERATE: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(key: &str, msg: impl fmt::Display) -> Self {
        CliError { code: EXIT_CONFIG, message: format!("config key `{key}`: {msg}") }
    }

    /// Wraps a library error, prefixing it with the config section or file
    /// it concerns.
    pub fn core(context: &str, e: frc_core::Error) -> Self {
        let code = match e.class() {
            ErrorClass::Input => EXIT_CONFIG,
            ErrorClass::Numerical => EXIT_NUMERICAL,
            ErrorClass::Degenerate => EXIT_DEGENERATE,
        };
        CliError { code, message: format!("{context}: {e}") }
    }

    pub fn io(context: &str, e: std::io::Error) -> Self {
        CliError { code: EXIT_CONFIG, message: format!("{context}: {e}") }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Attaches a context label to library results.
pub trait Context<T> {
    fn context(self, label: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for frc_core::Result<T> {
    fn context(self, label: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::core(label, e))
    }
}
