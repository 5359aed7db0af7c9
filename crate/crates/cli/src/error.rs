use std::fmt;

/// Error reported by a command, printed as a single line on standard error.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Unreadable or invalid configuration or input files.
    Invalid,
    /// Training or evaluation failed.
    Training,
    /// Output could not be written.
    Io,
}

impl ErrorKind {
    pub fn tag(self) -> &'static str {
        match self {
            ErrorKind::Invalid => "invalid",
            ErrorKind::Training => "training",
            ErrorKind::Io => "io",
        }
    }
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Invalid, message)
    }

    pub fn training(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Training, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Io, message)
    }

    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        let message: String = message.into();
        Self {
            kind,
            message: message.split_whitespace().collect::<Vec<_>>().join(" "),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Invalid => 2,
            ErrorKind::Training => 3,
            ErrorKind::Io => 4,
        }
    }

    /// Maps an engine error: configuration, format and metric problems are
    /// invalid input, everything else is a training failure.
    pub fn from_core(err: masseg_core::Error) -> Self {
        use masseg_core::Error as E;
        match err {
            E::Config { .. } | E::Format(_) | E::Metrics(_) | E::ParamMismatch { .. } => {
                Self::invalid(err.to_string())
            }
            E::Io(e) => Self::io(e.to_string()),
            other => Self::training(other.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind.tag(), self.message)
    }
}

impl std::error::Error for CliError {}
