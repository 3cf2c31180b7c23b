use thiserror::Error;

/// Errors raised by the estimation pipeline.
///
/// `code()` gives the stable machine-readable identifier used in CLI output.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{code}: {msg}")]
    Validation { code: String, msg: String },
    #[error("{code}: {msg}")]
    Identification { code: String, msg: String },
    #[error("degenerate model: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn code(&self) -> &str {
        match self {
            Error::Parse { .. } => "PARSE_ERROR",
            Error::Validation { code, .. } | Error::Identification { code, .. } => code,
            Error::Degenerate(_) => "DEGENERATE_MODEL",
            Error::Argument(_) => "ARGUMENT_ERROR",
            Error::Simulation(_) => "SIMULATION_ERROR",
            Error::Io(_) => "IO_ERROR",
        }
    }

    pub(crate) fn ident(code: &str, msg: impl Into<String>) -> Self {
        Error::Identification { code: code.to_string(), msg: msg.into() }
    }

    pub(crate) fn invalid(code: &str, msg: impl Into<String>) -> Self {
        Error::Validation { code: code.to_string(), msg: msg.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
