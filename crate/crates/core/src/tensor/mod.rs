//! Dense row-major tensors and the reverse-mode differentiation tape.
//!
//! A [`Tensor`] is a shape plus contiguous data. It may additionally carry a
//! node reference into a [`Tape`](tape::Tape), in which case the tape holds a
//! saved copy of its value and gradients can be propagated to it. Spatial
//! feature maps use H×W×C layout, which makes the HW×C token view a pure
//! metadata reshape.

pub mod gradcheck;
pub mod kernels;
pub mod qmtf;
pub mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Identifies a node on a specific tape instance, so stale handles from a
/// previous forward pass cannot silently corrupt a new one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape_id: u64,
    pub index: usize,
}

/// Data is reference-counted: clones, reshapes and tape bookkeeping share
/// the buffer instead of copying it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    pub(crate) node: Option<NodeRef>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<F>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![F::zero(); numel]), node: None }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; numel]), node: None }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]), node: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn into_data(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same data, no tape attachment.
    pub fn detached(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element of an H×W×C tensor.
    pub fn at3(&self, h: usize, w: usize, c: usize) -> F {
        debug_assert_eq!(self.shape.len(), 3);
        let (wd, ch) = (self.shape[1], self.shape[2]);
        self.data[(h * wd + w) * ch + c]
    }

    /// Mutation is only allowed on detached tensors; a tracked tensor's value
    /// is already saved on the tape. Copies on write when the buffer is
    /// shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        assert!(self.node.is_none(), "cannot mutate a tracked tensor");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            node: None,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| v.to_f64()).collect()),
            node: None,
        }
    }

    pub fn from_f64(t: &Tensor<f64>) -> Self {
        Tensor {
            shape: t.shape.clone(),
            data: Arc::new(t.data.iter().map(|&v| F::from_f64(v)).collect()),
            node: None,
        }
    }
}

/// Max-norm distance between same-shaped tensors; panics on shape mismatch.
pub fn max_abs_diff<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> F {
    assert_eq!(a.shape(), b.shape());
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| (x - y).abs())
        .fold(F::zero(), |m, d| if d > m { d } else { m })
}
