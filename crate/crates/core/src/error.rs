use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    Normalization,

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("train-mode forward needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite gradient in parameter `{0}`")]
    Gradient(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("empty input")]
    EmptyInput,

    #[error("labeling has no clusters")]
    NoClusters,

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("query {0} has no same-label partner in the batch")]
    SamplerContractViolation(usize),

    #[error("sampler needs {needed} identities, only {available} available")]
    Sampler { needed: usize, available: usize },

    #[error("cannot split: {0}")]
    Split(String),

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}; batch indices {indices:?}")]
    NonFiniteLoss {
        epoch: usize,
        iteration: usize,
        indices: Vec<usize>,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parameter { .. } | Error::Config { .. } => ErrorClass::Config,
            Error::Normalization
            | Error::Gradient(_)
            | Error::NonFiniteLoss { .. }
            | Error::NoClusters => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
