use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the numeric stack is generic over.
///
/// `LinalgScalar` routes matrix products through ndarray's optimized kernels
/// for `f32`/`f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (exact for `f64` itself).
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
