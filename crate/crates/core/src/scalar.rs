use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point type the deterministic layers are written against (f32 or f64).
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + nalgebra::Scalar
    + Sum
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
{
    /// Lossy conversion from an f64 literal.
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar representable as f64")
    }

    /// Machine epsilon scaled for "is this exactly zero up to rounding" checks.
    fn tiny() -> Self {
        Self::epsilon() * Self::lit(16.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
