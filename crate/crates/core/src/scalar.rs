use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, NumCast};

/// Floating point type the numeric core is generic over: `f32` or `f64`.
///
/// Gradient checks at the tolerances used throughout the crate only hold
/// for `f64`; `f32` is supported for inference and experimentation.
pub trait Scalar:
    Float + FromPrimitive + NumCast + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`. Never fails for finite input.
    fn of(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 is representable as a float scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float scalar converts to f64")
    }

    /// Smallest norm accepted by normalizing primitives.
    fn eps_norm() -> Self {
        Self::of(1e-12)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
