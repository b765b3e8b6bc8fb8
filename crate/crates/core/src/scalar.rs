//! Floating point abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar type the engine is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `½ log(2π)`.
    #[inline]
    fn half_ln_2pi() -> Self {
        Self::lit(0.918_938_533_204_672_7)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `log(mean(exp(xs)))`.
pub fn log_mean_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + (sum / T::from_usize_lossy(xs.len())).ln()
}

/// Log-density of `N(x | mean, sd²)`.
#[inline]
pub fn normal_log_pdf<T: Scalar>(x: T, mean: T, sd: T) -> T {
    let z = (x - mean) / sd;
    -T::half_ln_2pi() - sd.ln() - T::lit(0.5) * z * z
}
