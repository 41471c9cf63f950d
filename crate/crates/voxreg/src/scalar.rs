//! Generic floating-point scalar: f32 or f64.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the whole crate is generic over.
///
/// `nalgebra::RealField` supplies the transcendental functions and small
/// linear algebra; the num-traits bounds supply lossless-ish conversion
/// from literal constants.
pub trait Real:
    nalgebra::RealField + Copy + Default + FromPrimitive + ToPrimitive + std::fmt::Display
{
    /// Convert an `f64` constant into `Self`.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }

    /// Widen to `f64` (exact for f32/f64).
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real widens to f64")
    }

    #[inline]
    fn inf() -> Self {
        Self::of(f64::INFINITY)
    }

    #[inline]
    fn neg_inf() -> Self {
        Self::of(f64::NEG_INFINITY)
    }
}

impl Real for f32 {}
impl Real for f64 {}
