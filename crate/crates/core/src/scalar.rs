//! Scalar abstraction shared by the numeric modules.
//!
//! Cost fitting, quantization, and the length predictor are written against
//! [`Scalar`] so they run in either `f32` or `f64`. The simulator itself is
//! pinned to `f64` through the aliases exported at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by the numeric kernels.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar.
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    /// Converts an unsigned count into this scalar.
    fn of_count(v: u64) -> Self {
        Self::from_u64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip_small_integers() {
        assert_eq!(f32::of(3.0), 3.0f32);
        assert_eq!(f64::of_count(17), 17.0);
        assert_eq!(2.5f32.as_f64(), 2.5);
    }
}
