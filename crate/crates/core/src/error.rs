use alloc::string::String;
use core::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// An argument violated a documented precondition.
    InvalidInput(String),
    /// A handler name, weight shape or config key did not line up.
    Configuration(String),
    /// A content-addressed object is absent from the store.
    NotFound(String),
    /// Stored bytes no longer match their digest.
    Corruption(String),
    /// A provenance graph is structurally broken (cycle, self-reference).
    MalformedProvenance(String),
    /// A ledger transaction was rejected before execution.
    Rejected(String),
    /// A contract handler aborted; its effects were rolled back.
    HandlerFailure(String),
    /// A byte payload could not be decoded.
    Decode(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(m) => write!(f, "invalid input: {m}"),
            Error::Configuration(m) => write!(f, "configuration error: {m}"),
            Error::NotFound(m) => write!(f, "not found: {m}"),
            Error::Corruption(m) => write!(f, "corruption: {m}"),
            Error::MalformedProvenance(m) => write!(f, "malformed provenance: {m}"),
            Error::Rejected(m) => write!(f, "rejected: {m}"),
            Error::HandlerFailure(m) => write!(f, "handler failure: {m}"),
            Error::Decode(m) => write!(f, "decode error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail_invalid {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::InvalidInput(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail_invalid;
