use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Floating-point element type accepted by the engine.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Bits of mantissa precision, used to pick finite-difference steps.
    const MANTISSA_BITS: u32;
    const NAME: &'static str;
}

impl Real for f32 {
    const MANTISSA_BITS: u32 = 24;
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const MANTISSA_BITS: u32 = 53;
    const NAME: &'static str = "f64";
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn cst<T: Real>(v: f64) -> T {
    <T as num_traits::NumCast>::from(v).expect("f64 literal representable")
}
