//! Scalar abstraction shared by the geometry and evaluation code.
//!
//! Everything that only needs field arithmetic and ordering (IoU, NMS,
//! letterbox unmapping, AP integration) is written against [`Scalar`], so the
//! same code runs on `f32`, `f64` and exact rationals.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};

/// Exact rational scalar used by reference computations.
pub type Rational = Ratio<i128>;

/// Numeric type usable for box coordinates, scores and metric arithmetic.
pub trait Scalar:
    Num + Signed + PartialOrd + Copy + Debug + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// `false` for NaN and infinities. Rationals are always finite.
    fn is_finite_value(&self) -> bool;

    fn from_int(v: i64) -> Self {
        Self::from_i64(v).expect("integer representable in scalar")
    }

    /// `num / den` computed in the scalar's own arithmetic.
    fn ratio(num: i64, den: i64) -> Self {
        Self::from_int(num) / Self::from_int(den)
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl Scalar for f32 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Ratio<i64> {
    fn is_finite_value(&self) -> bool {
        true
    }
}

impl Scalar for Ratio<i128> {
    fn is_finite_value(&self) -> bool {
        true
    }
}
