use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not satisfy the primitive's shape rule.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    UnknownPrimitive(String),
    NonScalarLoss(Vec<usize>),
    InvalidArgument(String),
    InvalidConfig(String),
    /// A finite-difference probe hit a non-finite value at these flat indices.
    NonFinite(Vec<usize>),
    UnknownParameter(String),
    /// A profiling stage failed; `stage` names the cost stage.
    Stage { stage: &'static str, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::UnknownPrimitive(name) => write!(f, "unknown primitive `{name}`"),
            Error::NonScalarLoss(shape) => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid adapter config: {msg}"),
            Error::NonFinite(idx) => {
                write!(f, "function is non-finite at perturbed indices {idx:?}")
            }
            Error::UnknownParameter(name) => write!(f, "no parameter named `{name}`"),
            Error::Stage { stage, message } => write!(f, "{stage} stage failed: {message}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
