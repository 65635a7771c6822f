use thiserror::Error;

/// Errors raised by the library. Each variant names the module that produced it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Bad or missing configuration: unknown registry key, invalid range, etc.
    #[error("configuration error ({module}): {message}")]
    Config { module: &'static str, message: String },

    /// A registered model family produced a non-finite or out-of-contract value.
    #[error("model definition error: {0}")]
    ModelDefinition(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Exact optimal transport was requested on a support larger than allowed.
    #[error("support too large for exact transport: {left} x {right} atoms (limit {limit})")]
    SupportTooLarge { left: usize, right: usize, limit: usize },

    /// An enumeration (measure set, decision rules) would exceed its cap.
    #[error("combinatorial blowup in {what}: {count} exceeds cap {cap}")]
    Blowup { what: &'static str, count: u128, cap: u128 },

    #[error("numerical blowup at step {step}: non-finite state")]
    NumericalBlowup { step: usize },

    #[error("unsupported structure: {0}")]
    Unsupported(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(module: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            module,
            message: message.into(),
        }
    }

    /// True for errors caused by user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::DimensionMismatch { .. }
                | Error::Unsupported(_)
                | Error::Blowup { .. }
                | Error::SupportTooLarge { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
