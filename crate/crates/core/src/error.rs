use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported derivative order {0} (supported: 0..=3)")]
    UnsupportedOrder(usize),

    #[error("model construction failed: {0}")]
    Construction(String),

    #[error("numerical failure at step {step}: {reason}")]
    Numerical { step: usize, reason: String },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("{escaped} of {total} paths left the spatial domain")]
    DomainEscape { escaped: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
