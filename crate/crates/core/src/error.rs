use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("unknown node id {0}")]
    Lookup(u64),
    #[error("lookup error: {0}")]
    LookupMsg(String),
    #[error("missing attribute: {0}")]
    Attribute(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 3 for numeric failures, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Numeric(_) | Error::Singular(_) => 3,
            _ => 2,
        }
    }
}

impl Error {
    /// The message without the variant prefix.
    pub fn detail(&self) -> String {
        match self {
            Error::Dimension(s)
            | Error::Numeric(s)
            | Error::Singular(s)
            | Error::LookupMsg(s)
            | Error::Attribute(s)
            | Error::Contract(s)
            | Error::Assembly(s)
            | Error::Validation(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
