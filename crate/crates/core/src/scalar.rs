//! Floating-point scalar abstraction shared by the network and optimizer.
//!
//! Production training runs in `f32`; gradient checks run the identical code
//! path in `f64`.

use ndarray::NdFloat;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// f32 or f64.
pub trait Scalar:
    NdFloat + FloatConst + FromPrimitive + ToPrimitive + Default + Serialize + DeserializeOwned
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal is representable")
    }

    #[inline]
    fn lit_f32(x: f32) -> Self {
        Self::from_f32(x).expect("f32 value is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
