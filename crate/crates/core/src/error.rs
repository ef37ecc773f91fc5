use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("point is off the hyperboloid: <x,x>_L = {inner}")]
    OffManifold { inner: f64 },
    #[error("argument outside the domain of {what}: {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("numeric failure at step {step}: {what}")]
    NumericAtStep { step: usize, what: &'static str },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("sequence out of order at position {0}")]
    Ordering(usize),
    #[error("unknown {kind} index {index}")]
    Lookup { kind: &'static str, index: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("state error: {0}")]
    State(&'static str),
    #[error("training diverged at epoch {epoch}, batch {batch}: {what}")]
    Diverged { epoch: usize, batch: usize, what: String },
    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),
}

impl Error {
    /// Coarse class used by the command-line tool to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Parameter(_) => ErrorClass::Config,
            Error::Input(_) | Error::Data(_) | Error::Ordering(_) | Error::Lookup { .. } | Error::State(_) => {
                ErrorClass::Data
            }
            _ => ErrorClass::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}
