use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input out of domain: {0}")]
    InputDomain(String),

    #[error("enumeration of {size} solutions exceeds the cap of {cap}")]
    EnumerationTooLarge { size: u128, cap: usize },

    #[error("update rejected: {0}")]
    UpdateRejected(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training step aborted: {0}")]
    TrainingAborted(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
