//! Finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Scalar-valued function of a single tensor argument, evaluated on a tape.
pub type ScalarFn<F> = dyn Fn(&mut Tape<F>, &Tensor<F>) -> Result<Tensor<F>>;

/// Which coordinates of a tensor to probe with central differences.
#[derive(Debug, Clone, Copy)]
pub enum CoordSample {
    /// Every coordinate.
    All,
    /// A seeded random subset of at most `n` coordinates (used for large
    /// parameter tensors where probing every coordinate is prohibitive).
    Subset { n: usize, seed: u64 },
}

impl CoordSample {
    pub fn pick(&self, numel: usize) -> Vec<usize> {
        match *self {
            CoordSample::All => (0..numel).collect(),
            CoordSample::Subset { n, seed } => {
                if numel <= n {
                    return (0..numel).collect();
                }
                let mut idx: Vec<usize> = (0..numel).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                idx.shuffle(&mut rng);
                idx.truncate(n);
                idx.sort_unstable();
                idx
            }
        }
    }
}

/// Relative error between an analytic and a numeric derivative, guarded
/// against vanishing denominators.
pub fn relative_error<F: Scalar>(analytic: F, numeric: F) -> f64 {
    let a = analytic.to_f64();
    let n = numeric.to_f64();
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `theta` against central differences
/// with step `eps`, returning the maximum relative error over the probed
/// coordinates. Non-finite evaluations are reported as errors.
pub fn grad_check<F: Scalar>(
    f: &ScalarFn<F>,
    theta: &Tensor<F>,
    eps: F,
    coords: CoordSample,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(theta)?;
    let loss = f(&mut tape, &x)?;
    if !loss.is_scalar() {
        return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<F> = match grads.wrt(&x) {
        Some(g) => g.to_vec(),
        // Gradient never reached the input: treat as identically zero.
        None => vec![F::zero(); theta.numel()],
    };

    let eval = |t: &Tensor<F>| -> Result<F> {
        let mut tape = Tape::eval();
        let out = f(&mut tape, t)?;
        if !out.is_scalar() {
            return Err(Error::NonScalarLoss { shape: out.shape().to_vec() });
        }
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check evaluation" });
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    for i in coords.pick(theta.numel()) {
        let mut plus = theta.detached();
        plus.data_mut()[i] += eps;
        let mut minus = theta.detached();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (eps + eps);
        let err = relative_error(analytic[i], numeric);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
