use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("lookup error: missing key `{0}`")]
    Lookup(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, shape_err};
