//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Real`], which is just
//! the intersection of the `num-traits` float surface with what `ndarray`
//! needs for dense linear algebra. `f32` and `f64` implement it; the crate
//! root exposes `f64` aliases for the common types.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum<Self>
    + ScalarOperand
    + LinalgScalar
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` constant into this scalar type.
    ///
    /// Panics only if the type cannot represent ordinary finite constants,
    /// which no `Real` implementor does.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant must be representable")
    }

    /// Lossy view of this scalar as `f64`, for reporting and p-values.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("real scalar must convert to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Tolerance for checking that a routing-weight vector lies on the simplex.
///
/// `1e-9` is the contract for `f64`; wider-epsilon scalars get a tolerance
/// scaled to their precision so the same code is usable with `f32`.
pub fn simplex_tolerance<T: Real>(num_experts: usize) -> T {
    let contract = T::of(1e-9);
    let machine = T::epsilon() * T::of(100.0 * num_experts.max(1) as f64);
    if machine > contract {
        machine
    } else {
        contract
    }
}
