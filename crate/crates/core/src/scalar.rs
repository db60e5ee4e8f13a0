//! Floating-point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used for logits, probabilities and rewards: `f32` or `f64`.
///
/// Probabilities come out of a softmax, so the scalar has to be a float;
/// exact rationals cannot represent them.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every float scalar")
    }

    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize converts to float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Formats a value with 17 significant digits so text output round-trips exactly.
pub fn fmt17<T: Scalar>(x: T) -> String {
    format!("{:.16e}", x.as_f64())
}

/// `ln Σ exp(x_i)` computed with the max shift.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let total: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

/// Softmax of `logits / temperature`.
pub fn softmax<T: Scalar>(logits: &[T], temperature: T) -> Vec<T> {
    let scaled: Vec<T> = logits.iter().map(|&z| z / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|&z| (z - lse).exp()).collect()
}

/// Log-softmax of `logits / temperature` at a single index.
pub fn log_softmax_at<T: Scalar>(logits: &[T], temperature: T, index: usize) -> T {
    let scaled: Vec<T> = logits.iter().map(|&z| z / temperature).collect();
    scaled[index] - log_sum_exp(&scaled)
}
