//! Element type abstraction for network computation.
//!
//! Production code runs in `f32`; the gradient-check tests instantiate the
//! same networks in `f64` so central finite differences are not drowned in
//! rounding noise.

use ndarray::{LinalgScalar, NdFloat};
use std::iter::Sum;

/// Floating-point element type usable by the network engine.
pub trait Scalar: NdFloat + LinalgScalar + Sum + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
