//! Floating-point abstraction shared by every numeric module.
//!
//! All model, filter and tracker code is written against [`Scalar`] so the
//! same pipeline can run in `f32` (smaller checkpoints, faster inference) or
//! `f64` (gradient checks, reference runs). Serialized artifacts always store
//! `f64`, which represents every `f32` exactly.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal; values outside the type's range saturate
    /// to infinity like an `as` cast.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(|| if v > 0.0 { Self::infinity() } else { Self::neg_infinity() })
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::lit(v as f64)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `log(1 + exp(x))`, stable for large |x|.
    #[inline]
    fn softplus(self) -> Self {
        if self > Self::lit(30.0) {
            self
        } else if self < Self::lit(-30.0) {
            self.exp()
        } else {
            self.exp().ln_1p()
        }
    }

    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_definition_and_stays_positive() {
        for &x in &[-50.0f64, -5.0, 0.0, 1.0, 20.0, 40.0] {
            let naive = x.exp().ln_1p();
            assert!((x.softplus() - naive).abs() <= 1e-12 * naive.max(1e-300), "x={x}");
            assert!(x.softplus() > 0.0);
        }
        assert!((0.0f32.softplus() - std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn sigmoid_is_derivative_of_softplus() {
        let h = 1e-6;
        for &x in &[-4.0f64, -0.3, 0.0, 2.5] {
            let fd = ((x + h).softplus() - (x - h).softplus()) / (2.0 * h);
            assert!((fd - x.sigmoid()).abs() < 1e-8);
        }
    }
}
