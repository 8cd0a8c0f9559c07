//! CLI errors and the exit-code taxonomy.

use std::fmt;

use snmm::Error;

/// Failures outside the taxonomy, such as unwritable output files.
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_ESTIMATION: i32 = 4;
pub const EXIT_ACCEPTANCE: i32 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: format!("config error: {}", message.into()),
        }
    }

    /// A configuration error located by a JSON pointer.
    pub fn config_at(pointer: &str, message: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: format!("config error at {pointer}: {message}"),
        }
    }

    pub fn acceptance(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_ACCEPTANCE,
            message: message.into(),
        }
    }

    /// Library errors raised while reading the panel.
    pub fn from_data(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::config_at("/schema", m),
            other => CliError {
                code: EXIT_DATA,
                message: other.to_string(),
            },
        }
    }

    /// Library errors raised while building a model against `pointer`.
    pub fn from_spec(pointer: &str, e: Error) -> Self {
        match e {
            Error::Config(m) | Error::Unsupported(m) | Error::Dimension(m) => CliError::config_at(pointer, m),
            other => CliError::from(other),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Unsupported(_) => EXIT_CONFIG,
            Error::Data(_) | Error::MissingCell { .. } => EXIT_DATA,
            _ => EXIT_ESTIMATION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_OTHER,
            message: format!("io error: {e}"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}
