//! Error classes and their stable exit codes.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file or input file. Exit 2.
    Config(String),
    /// A numerical guard of the library tripped. Exit 3.
    Guard {
        guard: &'static str,
        message: String,
    },
    /// A consistency check failed. Exit 1.
    Consistency(String),
    /// Writing output failed. Exit 2.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Consistency(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Guard { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Guard { guard, message } => {
                write!(f, "numerical guard `{guard}` tripped: {message}")
            }
            CliError::Consistency(m) => write!(f, "consistency check failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<qtraj::Error> for CliError {
    fn from(e: qtraj::Error) -> Self {
        match e.guard_name() {
            Some(guard) => CliError::Guard {
                guard,
                message: e.to_string(),
            },
            None => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(CliError::Consistency(String::new()).exit_code(), 1);
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(
            CliError::from(qtraj::Error::Truncation("x".into())).exit_code(),
            3
        );
        assert_eq!(CliError::from(qtraj::Error::InvalidSpace(0)).exit_code(), 2);
        let step = CliError::from(qtraj::Error::StepSize("p".into()));
        assert!(step.to_string().contains("step-size"));
    }
}
