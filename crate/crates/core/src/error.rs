use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller broke a precondition (shape mismatch, bad partition, out-of-range group).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration; `field` names the offending setting.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
