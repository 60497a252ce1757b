//! Floating-point abstraction so every algorithm runs identically over
//! `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type for all numeric code in this crate.
///
/// The `real` constructor is the only way constants enter generic code, so
/// a literal written once works for both precisions.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this scalar type.
    fn real(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any supported scalar")
    }

    /// Lossy view as `f64`, for formatting and cross-type comparisons.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Probability floor applied before every logarithm and division guard.
pub fn prob_floor<T: Scalar>() -> T {
    T::real(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_round_trips_for_both_precisions() {
        assert_eq!(<f64 as Scalar>::real(0.25), 0.25f64);
        assert_eq!(<f32 as Scalar>::real(0.25), 0.25f32);
    }
}
