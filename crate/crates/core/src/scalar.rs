//! Scalar abstraction for the numeric kernels.
//!
//! Everything under [`crate::tensor`], the spectral forward model, the loss
//! functions and the metric computations is generic over [`Scalar`]. The
//! concrete pipeline (fusion model, training, file formats) is pinned to
//! `f64` through the aliases at the crate root: gradient checking at 1e-5
//! relative tolerance needs the full 64-bit mantissa.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

/// Floating-point scalar usable inside tensors and tapes.
pub trait Scalar: Float + NumAssign + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Numerically stable logistic function, branching on the sign so the
    /// exponential never overflows.
    fn stable_sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
