//! The floating-point abstraction shared by the estimation code.
//!
//! Everything that touches outcomes, covariates or residuals is generic over
//! [`Scalar`]. Probabilities, degrees of freedom and distribution functions
//! stay in `f64`; conversions go through [`Scalar::of`] and
//! [`Scalar::to_f64_lossy`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real number type usable by the estimators (`f64` and `f32` out of the box).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + FromStr
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this type.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    /// Converts a count into this type.
    fn of_count(n: usize) -> Self {
        Self::from_usize(n).expect("count is representable in every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Relative tolerance used to declare a design matrix rank deficient.
    fn rank_tolerance() -> Self {
        Self::of(1e-10).max(Self::epsilon() * Self::of(100.0))
    }
}

impl Scalar for f64 {}
impl Scalar for f32 {}
