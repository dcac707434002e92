use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CcnError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid permutation: {0}")]
    Permutation(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid contraction: {0}")]
    Contraction(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CcnError {
    fn from(e: std::io::Error) -> Self {
        CcnError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CcnError>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::CcnError::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
