//! Scalar abstractions.
//!
//! Learned components are generic over [`Scalar`] (`f32` or `f64`). Pure
//! quantization arithmetic only needs [`Field`], which also admits exact
//! rationals such as [`num_rational::BigRational`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Ordered field arithmetic: enough for nearest-neighbour search and residuals.
pub trait Field: Clone + PartialOrd + Num + Debug {}

impl<T: Clone + PartialOrd + Num + Debug> Field for T {}

/// Floating point element type of tensors that take part in differentiation.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Byte width tag written into checkpoints.
    const DTYPE: u8;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `DTYPE` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: u8 = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}
