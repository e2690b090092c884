use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Input,
    Service,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Input => 2,
            ErrorKind::Service => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Input,
            message: message.into(),
        }
    }

    pub fn service(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Service,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Wraps any error as an input error with some context.
pub trait InputContext<T> {
    fn input_ctx(self, what: impl fmt::Display) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> InputContext<T> for Result<T, E> {
    fn input_ctx(self, what: impl fmt::Display) -> Result<T, CliError> {
        self.map_err(|e| CliError::input(format!("{what}: {e}")))
    }
}
