//! Scalar abstraction shared by every kernel.
//!
//! Production runs use `f32`; finite-difference checks run the same code
//! paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of a [`crate::Tensor`]: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; constants in kernels go through here.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Suggested central-difference step for gradient checks.
    fn fd_step() -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn fd_step() -> Self {
        1e-2
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn fd_step() -> Self {
        1e-6
    }
}
