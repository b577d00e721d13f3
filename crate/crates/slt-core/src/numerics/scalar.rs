//! Scalar abstraction for the dense-array core.
//!
//! All array math is generic over [`Scalar`] so the same kernels serve f32
//! and f64. Training code uses the f64 aliases exported from the crate root;
//! f64 keeps oracle comparisons (CTC brute force, finite differences) exact
//! enough for the 1e-9 tolerances used in tests.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type of a [`Tensor`](super::Tensor).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Default + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand conversion for literals: `s::<S>(0.5)` or inferred `s(0.5)`.
pub fn s<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Lossy widening to f64, for reporting and serialization.
pub fn to_f64<S: Scalar>(x: S) -> f64 {
    x.to_f64().expect("scalar representable as f64")
}

/// Numerically stable log(exp(a) + exp(b)) on possibly -inf inputs.
pub fn log_add_exp<S: Scalar>(a: S, b: S) -> S {
    if a == S::neg_infinity() {
        return b;
    }
    if b == S::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
