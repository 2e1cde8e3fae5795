use svcsel_core::SvcError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable input, missing columns, malformed values or invalid options.
    #[error("{0}")]
    Input(String),

    #[error("{0}")]
    Io(String),

    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<SvcError> for CliError {
    fn from(e: SvcError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

/// How a command finished when it did produce output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    NotConverged,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::NotConverged => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::from(SvcError::NotPositiveDefinite { pivot: 0, value: -1.0 }).exit_code(), 3);
        assert_eq!(CliError::from(SvcError::InvalidArgument("x".into())).exit_code(), 2);
        let nested = SvcError::CoordinateDescent {
            iteration: 2,
            source: Box::new(SvcError::Numerical("nan".into())),
        };
        assert_eq!(CliError::from(nested).exit_code(), 3);
        assert_eq!(Status::NotConverged.exit_code(), 4);
        assert_eq!(Status::Success.exit_code(), 0);
    }
}
