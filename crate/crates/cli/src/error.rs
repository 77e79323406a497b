use std::fmt;

use s2sd_core::datapipe::DataError;
use s2sd_core::evaluation::EvalError;
use s2sd_core::inference::InferenceError;
use s2sd_core::network::NetworkError;
use s2sd_core::training::TrainError;

/// Failure classes and their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments, unreadable or unwritable paths.
    Usage,
    /// Nothing to work on.
    EmptyInput,
    Training,
    ConfigMismatch,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn empty(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::EmptyInput, message)
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::EmptyInput => 3,
            ErrorKind::Training => 4,
            ErrorKind::ConfigMismatch => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        let kind = match e {
            NetworkError::ConfigMismatch(_) | NetworkError::VersionMismatch { .. } => ErrorKind::ConfigMismatch,
            _ => ErrorKind::Usage,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match e {
            DataError::EmptySplit { .. } | DataError::NoValidSamples { .. } => ErrorKind::EmptyInput,
            _ => ErrorKind::Usage,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(d) => d.into(),
            EvalError::Network(n) => n.into(),
            other => Self::usage(other.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Data(d) => Self::usage(d.to_string()),
            InferenceError::Network(n) => n.into(),
            other => Self::usage(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::InvalidConfig(_) => ErrorKind::Usage,
            TrainError::SchemeMismatch { .. } => ErrorKind::ConfigMismatch,
            _ => ErrorKind::Training,
        };
        Self::new(kind, e.to_string())
    }
}
