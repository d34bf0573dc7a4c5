use rvlab_core::Error;

/// Process exit codes. The numbering is part of the command-line contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Usage = 2,
    Io = 3,
    Numeric = 4,
    Incompatible = 5,
}

impl ExitCode {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ExitCode::Usage,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: ExitCode::Io,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.code()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Bad flags or inputs map to usage, unreadable or corrupt files to I/O,
/// blown-up arithmetic to numeric, and checkpoint/config disagreement to
/// compatibility.
pub fn exit_kind(e: &Error) -> ExitCode {
    match e {
        Error::ConfigInvalid(_)
        | Error::UnknownTimestep(_)
        | Error::SequenceTooShort { .. }
        | Error::ShapeMismatch { .. } => ExitCode::Usage,
        Error::Io(_) | Error::Json(_) | Error::Format(_) | Error::Checksum { .. } | Error::EmptyCorpus => ExitCode::Io,
        Error::Incompatible(_) | Error::MissingParam(_) => ExitCode::Incompatible,
        Error::NonFiniteLoss(_)
        | Error::NonFinite(_)
        | Error::NonScalarLoss(_)
        | Error::NotSquare(_)
        | Error::LengthMismatch { .. }
        | Error::IndexOutOfRange { .. }
        | Error::EmptyMatrix
        | Error::DegenerateBox => ExitCode::Numeric,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            kind: exit_kind(&e),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
