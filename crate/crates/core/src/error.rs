use alloc::string::String;
use core::fmt;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operator received operands whose shapes do not fit together.
    Shape { op: &'static str, detail: String },
    /// `backward` was called on something other than a scalar.
    NonScalarLoss { shape: alloc::vec::Vec<usize> },
    /// The optimizer found a parameter without a populated gradient.
    MissingGrad { param: String },
    /// A configuration value is out of its admissible range.
    Config(String),
    /// A scene violates one of its structural invariants.
    Scene(String),
    /// A mask plan does not match the scene it is applied to.
    Mask(String),
    /// A loss or metric was asked for something it cannot compute.
    Loss(String),
    /// A non-finite loss was produced during training.
    Diverged { step: u64, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in `{op}`: {detail}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::MissingGrad { param } => write!(f, "parameter `{param}` has no gradient"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Scene(msg) => write!(f, "invalid scene: {msg}"),
            Error::Mask(msg) => write!(f, "invalid mask plan: {msg}"),
            Error::Loss(msg) => write!(f, "loss error: {msg}"),
            Error::Diverged { step, detail } => write!(f, "training diverged at step {step}: {detail}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
