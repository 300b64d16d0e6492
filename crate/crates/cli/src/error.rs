use std::fmt;

use msseg_core::Error;

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Usage = 2,
    Data = 3,
    Internal = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub class: ExitClass,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { class: ExitClass::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { class: ExitClass::Data, message: message.into() }
    }

    pub fn code(&self) -> u8 {
        self.class as u8
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
        let class = match e {
            Error::Config(_) | Error::Param(_) => ExitClass::Usage,
            Error::Io(_)
            | Error::Format(_)
            | Error::Unsupported(_)
            | Error::Shape(_)
            | Error::Unsampleable(_)
            | Error::Checkpoint(_)
            | Error::Empty(_) => ExitClass::Data,
            Error::InvalidCondition(_) | Error::Contract(_) | Error::UndefinedCorrelation(_) => ExitClass::Internal,
        };
        Self { class, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
