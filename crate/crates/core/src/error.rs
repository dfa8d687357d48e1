use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Shape(String),
    /// An id or row index is out of range.
    Index(String),
    /// Invalid model, index, or run configuration.
    Config(String),
    /// Malformed model input (empty query, bad feature value, ...).
    Input(String),
    /// Batch too small for the requested operation.
    Batch(String),
    /// Label outside {0, 1}.
    Label(String),
    /// API contract violation (e.g. non-scalar loss passed to a gradient check).
    Contract(String),
    /// Dataset invariant violation or insufficient data.
    Data(String),
    /// Metric undefined for the given input.
    Metric(String),
    /// Non-finite loss encountered during training.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "dimension error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Batch(m) => write!(f, "batch error: {m}"),
            Error::Label(m) => write!(f, "label error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Metric(m) => write!(f, "undefined metric: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
        }
    }
}

impl core::error::Error for Error {}
