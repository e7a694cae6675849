//! Scalar abstraction so the model stack runs in either f32 or f64.
//!
//! Training uses [`Real`] (f32); the finite-difference gradient harness
//! instantiates everything with f64, where central differences are reliable.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for model parameters and activations.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Shorthand for converting an f64 constant.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    fn to_f32c(self) -> f32 {
        self.to_f32().expect("scalar convertible to f32")
    }

    fn from_f32c(v: f32) -> Self {
        Self::from_f32(v).expect("f32 representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
