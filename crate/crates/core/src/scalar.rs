//! Scalar abstraction shared by the numeric modules.
//!
//! Everything that is pure linear algebra (structure matrices, kriging,
//! variogram fitting, LOESS) is written against [`Scalar`] so it can run in
//! `f32` or `f64`. The likelihood and sampler work in `f64` only.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Machine epsilon for the type.
    #[inline]
    fn eps() -> Self {
        Self::default_epsilon()
    }

    #[inline]
    fn magnitude(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Scalar>(x: f64) -> f64 {
        T::lit(x).to_f64_lossy()
    }

    #[test]
    fn literal_conversion() {
        assert_eq!(roundtrip::<f64>(0.1), 0.1);
        assert!((roundtrip::<f32>(0.1) - 0.1).abs() < 1e-7);
        assert_eq!(f64::from_usize_lossy(7), 7.0);
        assert_eq!((-2.5f32).magnitude(), 2.5);
    }
}
