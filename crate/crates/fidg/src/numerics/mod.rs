//! Deterministic tensor math: dense `f64` tensors, a reverse-mode tape that
//! supports higher-order gradients, a counter-based RNG, and Adam.
//!
//! Reductions run in a fixed sequential order, so repeated runs of the same
//! binary produce bit-identical floats. Nothing here is generic over dtype on
//! purpose: the whole laboratory runs on `f64`.

pub mod adam;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use rng::{splitmix64, Rng};
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;

use std::fmt;

/// Errors raised by tensor and tape operations.
///
/// These are programming errors in the caller most of the time (shape
/// mismatches), but they are surfaced as values rather than panics so the CLI
/// can map them to its numerical-failure exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// Two operands had incompatible shapes for the named op.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single operand had a shape the named op cannot accept.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    /// Data length does not match the product of the dimensions.
    LengthMismatch {
        expected: usize,
        actual: usize,
    },
    /// An op that requires a scalar received something else.
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    /// The tensor is not attached to the tape it was used with.
    TapeMismatch {
        op: &'static str,
    },
    /// backward() was asked about a tensor with no tape history.
    Detached {
        op: &'static str,
    },
    /// A value left the domain of the op (log of a negative number, ...).
    Domain {
        op: &'static str,
        value: f64,
    },
    /// A non-finite value appeared where the caller demanded finite math.
    NonFinite {
        op: &'static str,
    },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            NumericsError::InvalidShape { op, shape, reason } => {
                write!(f, "{op}: invalid shape {shape:?} ({reason})")
            }
            NumericsError::LengthMismatch { expected, actual } => {
                write!(f, "tensor data length {actual} does not match shape product {expected}")
            }
            NumericsError::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar, got shape {shape:?}")
            }
            NumericsError::TapeMismatch { op } => {
                write!(f, "{op}: tensor belongs to a different tape")
            }
            NumericsError::Detached { op } => {
                write!(f, "{op}: tensor has no tape history")
            }
            NumericsError::Domain { op, value } => {
                write!(f, "{op}: value {value} outside the op's domain")
            }
            NumericsError::NonFinite { op } => {
                write!(f, "{op}: non-finite value encountered")
            }
        }
    }
}

impl std::error::Error for NumericsError {}
