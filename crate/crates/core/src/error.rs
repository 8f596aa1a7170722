use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Every failure the core library can report.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands (or an operand and a parameter) disagree on shape.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A shape is malformed for the operation regardless of the other operands.
    InvalidShape { op: &'static str, reason: String },
    /// Non-scalar tensor handed to `backward`.
    NonScalarLoss(Vec<usize>),
    /// Batch norm in training mode needs at least two values per channel.
    DegenerateBatch { values_per_channel: usize },
    /// A function under finite-difference check returned different values for the same input.
    NonDeterministic { first: f64, second: f64 },
    /// Configuration or argument outside its valid domain.
    InvalidArgument(String),
    /// Backbone descriptor list is malformed.
    MalformedSpec { index: usize, reason: String },
    /// A checkpoint lacks an entry or disagrees with the model.
    Checkpoint(String),
    /// A trainable parameter reached the optimizer without a gradient.
    MissingGradient(String),
    /// Forward pass produced NaN or infinity; names the first offending op.
    NonFinite { op: &'static str, node: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::InvalidShape { op, reason } => write!(f, "{op}: {reason}"),
            Error::NonScalarLoss(shape) => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            Error::DegenerateBatch { values_per_channel } => write!(
                f,
                "batch norm in train mode needs N*H*W >= 2 per channel, got {values_per_channel}"
            ),
            Error::NonDeterministic { first, second } => write!(
                f,
                "function is not deterministic: evaluated to {first} and then {second}"
            ),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::MalformedSpec { index, reason } => {
                write!(f, "malformed backbone spec at descriptor {index}: {reason}")
            }
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Error::MissingGradient(path) => {
                write!(f, "trainable parameter `{path}` has no gradient")
            }
            Error::NonFinite { op, node } => {
                write!(f, "non-finite value first produced by `{op}` (node {node})")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
