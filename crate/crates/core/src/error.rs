use alloc::string::String;

/// Failure modes shared by every stage of the pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or geometries that do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A scalar argument outside its admissible range.
    #[error("out of range: {0}")]
    Range(String),
    /// Input data that does not parse as the expected layout.
    #[error("format error: {0}")]
    Format(String),
    /// No admissible anomaly placement exists.
    #[error("placement error: {0}")]
    Placement(String),
    /// Caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid model or architecture specification.
    #[error("invalid spec: {0}")]
    Spec(String),
    /// Missing or malformed weights.
    #[error("initialization error: {0}")]
    Init(String),
    /// Training data that breaks the normal-only contract.
    #[error("data contract violation: {0}")]
    Data(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
