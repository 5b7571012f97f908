//! Scalar abstraction for the numeric kernels.
//!
//! Everything numeric in this crate is written once, generic over [`Scalar`],
//! and instantiated at `f32` for the production forward/training paths and at
//! `f64` for gradient checks and reference oracles.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable by tensors, geometry helpers and losses.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + 'static
{
    /// Lossy conversion from `f64`, for configuration constants.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant representable in scalar type")
    }

    /// Widen to `f64`, for reporting and accumulation in oracles.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
