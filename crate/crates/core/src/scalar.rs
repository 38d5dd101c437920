//! Floating-point scalar abstraction.
//!
//! Every numeric kernel in the crate is generic over [`Scalar`], so the same
//! networks and losses run in `f32` for synthesis and in `f64` when gradients
//! are checked against finite differences.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short type tag used in manifests and diagnostics.
    const NAME: &'static str;

    #[inline]
    fn of(v: f64) -> Self {
        // Every finite f64 is representable (possibly rounded) in f32 and f64.
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Sum in `f64`, left to right. Used for every reduction so results are
/// reproducible regardless of the scalar type.
#[inline]
pub fn sum_f64<S: Scalar>(xs: &[S]) -> f64 {
    xs.iter().fold(0.0, |acc, &x| acc + x.f64())
}
