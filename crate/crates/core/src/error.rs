use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar argument is outside its valid domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Model, training or run configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates the expected protocol or format.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced NaN or infinity.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
