//! Scalar abstraction for the numeric core.
//!
//! Everything downstream of ingestion is generic over [`Scalar`], so the same
//! code paths run in `f64` (the default, and the only precision the reported
//! tolerances are meant for) and in `f32` (useful as a cheap conditioning
//! probe). Concrete aliases live at the crate root.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar used by the model core.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` constant into this scalar type.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant")
    }

    /// Lower into `f64`, e.g. at the distribution-tail boundary.
    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// ln(2π), used all over the Gaussian log-densities.
#[inline]
pub fn ln_2pi<F: Scalar>() -> F {
    F::of(1.8378770664093453)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_roundtrip() {
        assert_eq!(f64::of(2.5), 2.5);
        assert_eq!(2.5f64.f64(), 2.5);
        assert!((ln_2pi::<f64>() - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((ln_2pi::<f32>() - (2.0 * std::f32::consts::PI).ln()).abs() < 1e-6);
    }
}
