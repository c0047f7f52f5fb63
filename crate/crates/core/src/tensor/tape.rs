//! Define-by-run reverse-mode differentiation tape.
//!
//! A tape is rebuilt for every forward pass. Each recorded node stores the
//! operation, its parent node indices and a copy of its output value, so the
//! backward sweep can read any saved activation it needs. `backward` consumes
//! the tape, visits every node exactly once in reverse topological order
//! (which is simply reverse insertion order) and returns the gradients of the
//! scalar loss with respect to every tracked leaf.
//!
//! Ops check the finiteness of their outputs: a NaN or infinity anywhere is
//! reported as an error instead of propagating.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::{NodeRef, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Stable identifier of a model parameter, assigned by the parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    /// `a` is [rows×cols], `v` is [cols]; element-wise product per row.
    MulRowVec { a: usize, v: usize, rows: usize, cols: usize },
    AddRowVec { a: usize, v: usize, rows: usize, cols: usize },
    Scale { a: usize, c: F },
    AddScalar { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// C = A[m×k] · B[n×k]ᵀ
    MatmulNT { a: usize, b: usize, m: usize, k: usize, n: usize },
    GlobalAvgPool { x: usize, rows: usize, cols: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    SoftmaxRows { x: usize, rows: usize, cols: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, rows: usize, cols: usize, eps: F },
    ConcatCols { parts: Vec<usize>, rows: usize, widths: Vec<usize> },
    SliceCols { x: usize, rows: usize, cols: usize, from: usize, to: usize },
    StackRows { parts: Vec<usize>, cols: usize },
    Reshape { x: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    Ln { x: usize },
    Abs { x: usize },
    AsymmetricLoss {
        logits: usize,
        targets: Vec<bool>,
        gamma_pos: F,
        gamma_neg: F,
        margin: F,
    },
    CrossEntropyRows { logits: usize, classes: Vec<usize>, rows: usize, cols: usize },
}

#[derive(Debug, Clone)]
struct Node<F: Scalar> {
    /// Saved activation, shared with the tensor handed back to the caller.
    value: Arc<Vec<F>>,
    op: Op<F>,
    param: Option<ParamId>,
}

pub struct Tape<F: Scalar> {
    id: u64,
    recording: bool,
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`]. Keeps the full per-node buffers
/// so gradients with respect to tracked inputs stay addressable.
pub struct Gradients<F: Scalar> {
    tape_id: u64,
    grads: Vec<Option<Vec<F>>>,
    params: HashMap<ParamId, usize>,
}

impl<F: Scalar> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_deref())
    }

    /// Gradient with respect to a tracked tensor from the same forward pass.
    pub fn wrt(&self, t: &Tensor<F>) -> Option<&[F]> {
        let node = t.node?;
        if node.tape_id != self.tape_id {
            return None;
        }
        self.grads[node.index].as_deref()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    /// Recording tape for a forward/backward pass.
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
        }
    }

    /// Evaluation-only tape: ops compute values, nothing is recorded.
    pub fn eval() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            recording: false,
            nodes: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arc<Vec<F>>, shape: Vec<usize>, op: Op<F>, param: Option<ParamId>) -> Tensor<F> {
        let index = self.nodes.len();
        self.nodes.push(Node { value: Arc::clone(&value), op, param });
        let mut t = Tensor::from_shared(shape, value);
        t.node = Some(NodeRef { tape_id: self.id, index });
        t
    }

    /// Node index of `t` on this tape; errors when a recording tape is handed
    /// a tensor tracked by some other tape.
    fn node_of(&mut self, t: &Tensor<F>) -> Result<Option<usize>> {
        match t.node {
            Some(n) if n.tape_id == self.id => Ok(Some(n.index)),
            Some(_) if self.recording => Err(Error::DetachedTensor),
            _ => Ok(None),
        }
    }

    /// Registers `t` as a constant leaf so a tracked sibling can refer to it.
    fn ensure_node(&mut self, t: &Tensor<F>) -> Result<usize> {
        if let Some(idx) = self.node_of(t)? {
            return Ok(idx);
        }
        let index = self.nodes.len();
        self.nodes.push(Node { value: t.shared_data(), op: Op::Leaf, param: None });
        Ok(index)
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        value: Vec<F>,
        shape: Vec<usize>,
        op: Op<F>,
        tracked: bool,
    ) -> Result<Tensor<F>> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let value = Arc::new(value);
        if self.recording && tracked {
            Ok(self.push(value, shape, op, None))
        } else {
            Ok(Tensor::from_shared(shape, value))
        }
    }

    // ------------------------------------------------------------------
    // Leaves
    // ------------------------------------------------------------------

    /// Tracked leaf bound to a parameter id.
    pub fn param(&mut self, id: ParamId, value: &Tensor<F>) -> Result<Tensor<F>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "param" });
        }
        if !self.recording {
            return Ok(value.detached());
        }
        Ok(self.push(value.shared_data(), value.shape().to_vec(), Op::Leaf, Some(id)))
    }

    /// Tracked leaf without a parameter binding (e.g. a model input whose
    /// gradient is inspected directly).
    pub fn input(&mut self, value: &Tensor<F>) -> Result<Tensor<F>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "input" });
        }
        if !self.recording {
            return Ok(value.detached());
        }
        Ok(self.push(value.shared_data(), value.shape().to_vec(), Op::Leaf, None))
    }

    /// Constant: never receives a gradient.
    pub fn constant(&self, value: &Tensor<F>) -> Tensor<F> {
        value.detached()
    }

    // ------------------------------------------------------------------
    // Element-wise ops
    // ------------------------------------------------------------------

    fn same_shape(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        Self::same_shape("add", a, b)?;
        let value: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let tracked = self.any_tracked(&[a, b])?;
        let op = if tracked {
            let (na, nb) = (self.ensure_node(a)?, self.ensure_node(b)?);
            Op::Add { a: na, b: nb }
        } else {
            Op::Leaf
        };
        self.finish("add", value, a.shape().to_vec(), op, tracked)
    }

    pub fn sub(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        Self::same_shape("sub", a, b)?;
        let value: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let tracked = self.any_tracked(&[a, b])?;
        let op = if tracked {
            let (na, nb) = (self.ensure_node(a)?, self.ensure_node(b)?);
            Op::Sub { a: na, b: nb }
        } else {
            Op::Leaf
        };
        self.finish("sub", value, a.shape().to_vec(), op, tracked)
    }

    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        Self::same_shape("mul", a, b)?;
        let value: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let tracked = self.any_tracked(&[a, b])?;
        let op = if tracked {
            let (na, nb) = (self.ensure_node(a)?, self.ensure_node(b)?);
            Op::Mul { a: na, b: nb }
        } else {
            Op::Leaf
        };
        self.finish("mul", value, a.shape().to_vec(), op, tracked)
    }

    pub fn div(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        Self::same_shape("div", a, b)?;
        let value: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
        let tracked = self.any_tracked(&[a, b])?;
        let op = if tracked {
            let (na, nb) = (self.ensure_node(a)?, self.ensure_node(b)?);
            Op::Div { a: na, b: nb }
        } else {
            Op::Leaf
        };
        self.finish("div", value, a.shape().to_vec(), op, tracked)
    }

    /// Hadamard product. Either the shapes match exactly, or `b` is a vector
    /// matching the last (channel) dimension of `a` and is broadcast over the
    /// leading dimensions.
    pub fn hadamard(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() == b.shape() {
            return self.mul(a, b);
        }
        let cols = *a.shape().last().ok_or(Error::ShapeMismatch {
            op: "hadamard",
            detail: "empty lhs shape".into(),
        })?;
        if b.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "hadamard",
                detail: format!("{:?} vs channel vector {:?}", a.shape(), b.shape()),
            });
        }
        let rows = a.numel() / cols;
        let mut value = Vec::with_capacity(a.numel());
        for r in 0..rows {
            for c in 0..cols {
                value.push(a.data()[r * cols + c] * b.data()[c]);
            }
        }
        let tracked = self.any_tracked(&[a, b])?;
        let op = if tracked {
            let (na, nv) = (self.ensure_node(a)?, self.ensure_node(b)?);
            Op::MulRowVec { a: na, v: nv, rows, cols }
        } else {
            Op::Leaf
        };
        self.finish("hadamard", value, a.shape().to_vec(), op, tracked)
    }

    /// Adds a vector over the last dimension of `a` (bias broadcast).
    pub fn add_row_vec(&mut self, a: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
        let cols = *a.shape().last().ok_or(Error::ShapeMismatch {
            op: "add_row_vec",
            detail: "empty lhs shape".into(),
        })?;
        if v.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                detail: format!("{:?} vs vector {:?}", a.shape(), v.shape()),
            });
        }
        let rows = a.numel() / cols;
        let mut value = Vec::with_capacity(a.numel());
        for r in 0..rows {
            for c in 0..cols {
                value.push(a.data()[r * cols + c] + v.data()[c]);
            }
        }
        let tracked = self.any_tracked(&[a, v])?;
        let op = if tracked {
            let (na, nv) = (self.ensure_node(a)?, self.ensure_node(v)?);
            Op::AddRowVec { a: na, v: nv, rows, cols }
        } else {
            Op::Leaf
        };
        self.finish("add_row_vec", value, a.shape().to_vec(), op, tracked)
    }

    pub fn scale(&mut self, a: &Tensor<F>, c: F) -> Result<Tensor<F>> {
        let value: Vec<F> = a.data().iter().map(|&x| x * c).collect();
        let tracked = self.any_tracked(&[a])?;
        let op = if tracked {
            let na = self.ensure_node(a)?;
            Op::Scale { a: na, c }
        } else {
            Op::Leaf
        };
        self.finish("scale", value, a.shape().to_vec(), op, tracked)
    }

    pub fn add_scalar(&mut self, a: &Tensor<F>, c: F) -> Result<Tensor<F>> {
        let value: Vec<F> = a.data().iter().map(|&x| x + c).collect();
        let tracked = self.any_tracked(&[a])?;
        let op = if tracked {
            let na = self.ensure_node(a)?;
            Op::AddScalar { a: na }
        } else {
            Op::Leaf
        };
        self.finish("add_scalar", value, a.shape().to_vec(), op, tracked)
    }

    pub fn ln(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let value: Vec<F> = a.data().iter().map(|&x| x.ln()).collect();
        let tracked = self.any_tracked(&[a])?;
        let op = if tracked {
            let na = self.ensure_node(a)?;
            Op::Ln { x: na }
        } else {
            Op::Leaf
        };
        self.finish("ln", value, a.shape().to_vec(), op, tracked)
    }

    pub fn abs(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let value: Vec<F> = a.data().iter().map(|&x| x.abs()).collect();
        let tracked = self.any_tracked(&[a])?;
        let op = if tracked {
            let na = self.ensure_node(a)?;
            Op::Abs { x: na }
        } else {
            Op::Leaf
        };
        self.finish("abs", value, a.shape().to_vec(), op, tracked)
    }

    pub fn activation(&mut self, a: &Tensor<F>, kind: Activation) -> Result<Tensor<F>> {
        match kind {
            Activation::Relu => self.relu(a),
            Activation::Sigmoid => self.sigmoid(a),
        }
    }

    pub fn relu(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let value: Vec<F> =
            a.data().iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect();
        let tracked = self.any_tracked(&[a])?;
        let op = if tracked {
            let na = self.ensure_node(a)?;
            Op::Relu { x: na }
        } else {
            Op::Leaf
        };
        self.finish("relu", value, a.shape().to_vec(), op, tracked)
    }

    pub fn sigmoid(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let value: Vec<F> = a.data().iter().map(|&x| x.stable_sigmoid()).collect();
        let tracked = self.any_tracked(&[a])?;
        let op = if tracked {
            let na = self.ensure_node(a)?;
            Op::Sigmoid { x: na }
        } else {
            Op::Leaf
        };
        self.finish("sigmoid", value, a.shape().to_vec(), op, tracked)
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    fn dims2(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected matrix, got {:?}", t.shape()),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// Standard matrix product A[m×k] · B[k×n].
    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = Self::dims2("matmul", a)?;
        let (kb, n) = Self::dims2("matmul", b)?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {} vs {}", k, kb),
            });
        }
        let mut value = vec![F::zero(); m * n];
        kernels::matmul(m, k, n, a.data(), b.data(), &mut value);
        let tracked = self.any_tracked(&[a, b])?;
        let op = if tracked {
            let (na, nb) = (self.ensure_node(a)?, self.ensure_node(b)?);
            Op::Matmul { a: na, b: nb, m, k, n }
        } else {
            Op::Leaf
        };
        self.finish("matmul", value, vec![m, n], op, tracked)
    }

    /// A[m×k] · B[n×k]ᵀ — the attention-score form.
    pub fn matmul_nt(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = Self::dims2("matmul_nt", a)?;
        let (n, kb) = Self::dims2("matmul_nt", b)?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("inner dims {} vs {}", k, kb),
            });
        }
        let mut value = vec![F::zero(); m * n];
        kernels::matmul_nt(m, k, n, a.data(), b.data(), &mut value);
        let tracked = self.any_tracked(&[a, b])?;
        let op = if tracked {
            let (na, nb) = (self.ensure_node(a)?, self.ensure_node(b)?);
            Op::MatmulNT { a: na, b: nb, m, k, n }
        } else {
            Op::Leaf
        };
        self.finish("matmul_nt", value, vec![m, n], op, tracked)
    }

    /// Per-pixel affine map across channels: x is H×W×Cin (or rows×Cin),
    /// w is [Cout×Cin], bias optional [Cout].
    pub fn conv1x1(&mut self, x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let cin = *x.shape().last().ok_or(Error::ShapeMismatch {
            op: "conv1x1",
            detail: "empty input shape".into(),
        })?;
        let (cout, wk) = Self::dims2("conv1x1", w)?;
        if wk != cin {
            return Err(Error::ShapeMismatch {
                op: "conv1x1",
                detail: format!("input channels {} vs kernel {}", cin, wk),
            });
        }
        let rows = x.numel() / cin;
        let flat = self.reshape(x, vec![rows, cin])?;
        let mut y = self.matmul_nt(&flat, w)?;
        if let Some(bias) = b {
            y = self.add_row_vec(&y, bias)?;
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = cout;
        self.reshape(&y, out_shape)
    }

    /// Mean over all leading dimensions per channel: H×W×C → C.
    pub fn global_avg_pool(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let cols = *x.shape().last().ok_or(Error::ShapeMismatch {
            op: "global_avg_pool",
            detail: "empty input shape".into(),
        })?;
        let rows = x.numel() / cols;
        if rows == 0 {
            return Err(Error::EmptyInput { op: "global_avg_pool" });
        }
        let inv = F::from_f64(1.0 / rows as f64);
        let mut value = vec![F::zero(); cols];
        for r in 0..rows {
            for (c, v) in value.iter_mut().enumerate() {
                *v += x.data()[r * cols + c];
            }
        }
        for v in value.iter_mut() {
            *v *= inv;
        }
        let tracked = self.any_tracked(&[x])?;
        let op = if tracked {
            let nx = self.ensure_node(x)?;
            Op::GlobalAvgPool { x: nx, rows, cols }
        } else {
            Op::Leaf
        };
        self.finish("global_avg_pool", value, vec![cols], op, tracked)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (rows, cols) = Self::dims2("softmax_rows", x)?;
        if cols == 0 {
            return Err(Error::EmptyInput { op: "softmax_rows" });
        }
        let mut value = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let mx = row.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut sum = F::zero();
            for (o, &v) in value[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                sum += e;
            }
            for o in value[r * cols..(r + 1) * cols].iter_mut() {
                *o /= sum;
            }
        }
        let tracked = self.any_tracked(&[x])?;
        let op = if tracked {
            let nx = self.ensure_node(x)?;
            Op::SoftmaxRows { x: nx, rows, cols }
        } else {
            Op::Leaf
        };
        self.finish("softmax_rows", value, vec![rows, cols], op, tracked)
    }

    /// Per-token normalization over the last dimension, then affine.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<F>,
        gain: &Tensor<F>,
        bias: &Tensor<F>,
        eps: F,
    ) -> Result<Tensor<F>> {
        let cols = *x.shape().last().ok_or(Error::ShapeMismatch {
            op: "layer_norm",
            detail: "empty input shape".into(),
        })?;
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} vs feature width {}",
                    gain.shape(),
                    bias.shape(),
                    cols
                ),
            });
        }
        let rows = x.numel() / cols;
        let mut value = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let (mu, var) = row_moments(row);
            let s = (var + eps).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mu) / s;
                value[r * cols + c] = xhat * gain.data()[c] + bias.data()[c];
            }
        }
        let tracked = self.any_tracked(&[x, gain, bias])?;
        let op = if tracked {
            let (nx, ng, nb) =
                (self.ensure_node(x)?, self.ensure_node(gain)?, self.ensure_node(bias)?);
            Op::LayerNorm { x: nx, gain: ng, bias: nb, rows, cols, eps }
        } else {
            Op::Leaf
        };
        self.finish("layer_norm", value, x.shape().to_vec(), op, tracked)
    }

    // ------------------------------------------------------------------
    // Shape ops
    // ------------------------------------------------------------------

    pub fn reshape(&mut self, x: &Tensor<F>, shape: Vec<usize>) -> Result<Tensor<F>> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", x.shape(), shape),
            });
        }
        let tracked = self.any_tracked(&[x])?;
        if self.recording && tracked {
            let nx = self.ensure_node(x)?;
            Ok(self.push(x.shared_data(), shape, Op::Reshape { x: nx }, None))
        } else {
            Ok(Tensor::from_shared(shape, x.shared_data()))
        }
    }

    /// Concatenate along the last (channel) dimension. All parts must share
    /// their leading dimensions.
    pub fn concat_channels(&mut self, parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { op: "concat_channels" });
        }
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        for p in parts {
            if p.shape().is_empty() || &p.shape()[..p.shape().len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("{:?} vs leading dims {:?}", p.shape(), lead),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let tracked = {
            let mut any = false;
            for p in parts {
                any |= self.node_of(p)?.is_some();
            }
            any
        };
        let op = if tracked {
            let mut ids = Vec::with_capacity(parts.len());
            for p in parts {
                ids.push(self.ensure_node(p)?);
            }
            Op::ConcatCols { parts: ids, rows, widths }
        } else {
            Op::Leaf
        };
        self.finish("concat_channels", value, shape, op, tracked)
    }

    /// Channel range [from, to) of the last dimension.
    pub fn slice_channels(&mut self, x: &Tensor<F>, from: usize, to: usize) -> Result<Tensor<F>> {
        let cols = *x.shape().last().ok_or(Error::ShapeMismatch {
            op: "slice_channels",
            detail: "empty input shape".into(),
        })?;
        if from >= to || to > cols {
            return Err(Error::ShapeMismatch {
                op: "slice_channels",
                detail: format!("range {}..{} of {}", from, to, cols),
            });
        }
        let rows = x.numel() / cols;
        let width = to - from;
        let mut value = Vec::with_capacity(rows * width);
        for r in 0..rows {
            value.extend_from_slice(&x.data()[r * cols + from..r * cols + to]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let tracked = self.any_tracked(&[x])?;
        let op = if tracked {
            let nx = self.ensure_node(x)?;
            Op::SliceCols { x: nx, rows, cols, from, to }
        } else {
            Op::Leaf
        };
        self.finish("slice_channels", value, shape, op, tracked)
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { op: "stack_rows" });
        }
        let cols = parts[0].numel();
        for p in parts {
            if p.numel() != cols {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    detail: format!("{} vs {}", p.numel(), cols),
                });
            }
        }
        let mut value = Vec::with_capacity(parts.len() * cols);
        for p in parts {
            value.extend_from_slice(p.data());
        }
        let tracked = {
            let mut any = false;
            for p in parts {
                any |= self.node_of(p)?.is_some();
            }
            any
        };
        let op = if tracked {
            let mut ids = Vec::with_capacity(parts.len());
            for p in parts {
                ids.push(self.ensure_node(p)?);
            }
            Op::StackRows { parts: ids, cols }
        } else {
            Op::Leaf
        };
        self.finish("stack_rows", value, vec![parts.len(), cols], op, tracked)
    }

    // ------------------------------------------------------------------
    // Reductions
    // ------------------------------------------------------------------

    pub fn sum(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut s = F::zero();
        for &v in x.data() {
            s += v;
        }
        let tracked = self.any_tracked(&[x])?;
        let op = if tracked {
            let nx = self.ensure_node(x)?;
            Op::SumAll { x: nx }
        } else {
            Op::Leaf
        };
        self.finish("sum", vec![s], vec![], op, tracked)
    }

    pub fn mean(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.numel() == 0 {
            return Err(Error::EmptyInput { op: "mean" });
        }
        let mut s = F::zero();
        for &v in x.data() {
            s += v;
        }
        s /= F::from_f64(x.numel() as f64);
        let tracked = self.any_tracked(&[x])?;
        let op = if tracked {
            let nx = self.ensure_node(x)?;
            Op::MeanAll { x: nx }
        } else {
            Op::Leaf
        };
        self.finish("mean", vec![s], vec![], op, tracked)
    }

    // ------------------------------------------------------------------
    // Fused losses (numerically stable forms with hand-derived gradients)
    // ------------------------------------------------------------------

    /// Asymmetric multi-label loss over logits [N×K] with binary targets.
    /// Negatives have their probability shifted by `margin` and focused by
    /// `gamma_neg`; positives are focused by `gamma_pos`. Mean over all
    /// entries. With both gammas and the margin at zero this is exactly
    /// binary cross-entropy with logits.
    pub fn asymmetric_loss(
        &mut self,
        logits: &Tensor<F>,
        targets: &[bool],
        gamma_pos: F,
        gamma_neg: F,
        margin: F,
    ) -> Result<Tensor<F>> {
        if logits.numel() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "asymmetric_loss",
                detail: format!("{} logits vs {} targets", logits.numel(), targets.len()),
            });
        }
        let tiny = F::from_f64(1e-12);
        let one = F::one();
        let mut total = F::zero();
        for (&x, &y) in logits.data().iter().zip(targets) {
            let p = x.stable_sigmoid();
            if y {
                let pbar = if p > tiny { p } else { tiny };
                total -= (one - p).powf(gamma_pos) * pbar.ln();
            } else {
                let pm = if p - margin > F::zero() { p - margin } else { F::zero() };
                if pm > F::zero() {
                    let q = if one - pm > tiny { one - pm } else { tiny };
                    total -= pm.powf(gamma_neg) * q.ln();
                }
            }
        }
        let value = total / F::from_f64(targets.len() as f64);
        let tracked = self.any_tracked(&[logits])?;
        let op = if tracked {
            let nl = self.ensure_node(logits)?;
            Op::AsymmetricLoss {
                logits: nl,
                targets: targets.to_vec(),
                gamma_pos,
                gamma_neg,
                margin,
            }
        } else {
            Op::Leaf
        };
        self.finish("asymmetric_loss", vec![value], vec![], op, tracked)
    }

    /// Mean categorical cross-entropy from logits [N×K] against class
    /// indices, computed via log-sum-exp.
    pub fn cross_entropy_rows(&mut self, logits: &Tensor<F>, classes: &[usize]) -> Result<Tensor<F>> {
        let (rows, cols) = Self::dims2("cross_entropy_rows", logits)?;
        if classes.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_rows",
                detail: format!("{} rows vs {} classes", rows, classes.len()),
            });
        }
        for &c in classes {
            if c >= cols {
                return Err(Error::invalid(format!("class {} out of range 0..{}", c, cols)));
            }
        }
        let mut total = F::zero();
        for (r, &cl) in classes.iter().enumerate() {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let mx = row.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut se = F::zero();
            for &v in row {
                se += (v - mx).exp();
            }
            total += mx + se.ln() - row[cl];
        }
        let value = total / F::from_f64(rows as f64);
        let tracked = self.any_tracked(&[logits])?;
        let op = if tracked {
            let nl = self.ensure_node(logits)?;
            Op::CrossEntropyRows { logits: nl, classes: classes.to_vec(), rows, cols }
        } else {
            Op::Leaf
        };
        self.finish("cross_entropy_rows", vec![value], vec![], op, tracked)
    }

    fn any_tracked(&mut self, ts: &[&Tensor<F>]) -> Result<bool> {
        if !self.recording {
            return Ok(false);
        }
        let mut any = false;
        for t in ts {
            any |= self.node_of(t)?.is_some();
        }
        Ok(any)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients of all
    /// tracked leaves (parameters and inputs) are returned.
    pub fn backward(self, loss: &Tensor<F>) -> Result<Gradients<F>> {
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        let node = loss.node.ok_or(Error::DetachedTensor)?;
        if node.tape_id != self.id {
            return Err(Error::DetachedTensor);
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[node.index] = Some(vec![F::one()]);

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            // Leaf gradients must survive for the caller.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut params = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                params.insert(pid, i);
            }
        }
        Ok(Gradients { tape_id: self.id, grads, params })
    }

    fn acc(grads: &mut [Option<Vec<F>>], idx: usize, len: usize) -> &mut Vec<F> {
        grads[idx].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                kernels::axpy(F::one(), g, Self::acc(grads, *a, g.len()));
                kernels::axpy(F::one(), g, Self::acc(grads, *b, g.len()));
            }
            Op::Sub { a, b } => {
                kernels::axpy(F::one(), g, Self::acc(grads, *a, g.len()));
                kernels::axpy(-F::one(), g, Self::acc(grads, *b, g.len()));
            }
            Op::Mul { a, b } => {
                let (av, bv): (&[F], &[F]) = (&nodes[*a].value, &nodes[*b].value);
                {
                    let da = Self::acc(grads, *a, g.len());
                    for ((d, &gv), &bvv) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * bvv;
                    }
                }
                let db = Self::acc(grads, *b, g.len());
                for ((d, &gv), &avv) in db.iter_mut().zip(g).zip(av) {
                    *d += gv * avv;
                }
            }
            Op::Div { a, b } => {
                let (av, bv): (&[F], &[F]) = (&nodes[*a].value, &nodes[*b].value);
                {
                    let da = Self::acc(grads, *a, g.len());
                    for ((d, &gv), &bvv) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv / bvv;
                    }
                }
                let db = Self::acc(grads, *b, g.len());
                for (j, d) in db.iter_mut().enumerate() {
                    *d -= g[j] * av[j] / (bv[j] * bv[j]);
                }
            }
            Op::MulRowVec { a, v, rows, cols } => {
                let (av, vv): (&[F], &[F]) = (&nodes[*a].value, &nodes[*v].value);
                {
                    let da = Self::acc(grads, *a, rows * cols);
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] += g[r * cols + c] * vv[c];
                        }
                    }
                }
                let dv = Self::acc(grads, *v, *cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        dv[c] += g[r * cols + c] * av[r * cols + c];
                    }
                }
            }
            Op::AddRowVec { a, v, rows, cols } => {
                kernels::axpy(F::one(), g, Self::acc(grads, *a, rows * cols));
                let dv = Self::acc(grads, *v, *cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        dv[c] += g[r * cols + c];
                    }
                }
            }
            Op::Scale { a, c } => {
                kernels::axpy(*c, g, Self::acc(grads, *a, g.len()));
            }
            Op::AddScalar { a } => {
                kernels::axpy(F::one(), g, Self::acc(grads, *a, g.len()));
            }
            Op::Matmul { a, b, m, k, n } => {
                let (av, bv): (&[F], &[F]) = (&nodes[*a].value, &nodes[*b].value);
                {
                    // dA = dC · Bᵀ
                    let da = Self::acc(grads, *a, m * k);
                    kernels::matmul_nt_acc(*m, *n, *k, g, bv, da);
                }
                // dB = Aᵀ · dC
                let db = Self::acc(grads, *b, k * n);
                kernels::matmul_tn_acc(*m, *k, *n, av, g, db);
            }
            Op::MatmulNT { a, b, m, k, n } => {
                let (av, bv): (&[F], &[F]) = (&nodes[*a].value, &nodes[*b].value);
                {
                    // dA = dC · B
                    let da = Self::acc(grads, *a, m * k);
                    kernels::matmul_acc(*m, *n, *k, g, bv, da);
                }
                // dB = dCᵀ · A
                let db = Self::acc(grads, *b, n * k);
                kernels::matmul_tn_acc(*m, *n, *k, g, av, db);
            }
            Op::GlobalAvgPool { x, rows, cols } => {
                let inv = F::from_f64(1.0 / *rows as f64);
                let dx = Self::acc(grads, *x, rows * cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] += g[c] * inv;
                    }
                }
            }
            Op::Relu { x } => {
                let xv: &[F] = &nodes[*x].value;
                let dx = Self::acc(grads, *x, g.len());
                for (j, d) in dx.iter_mut().enumerate() {
                    if xv[j] > F::zero() {
                        *d += g[j];
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y: &[F] = &nodes[i].value;
                let dx = Self::acc(grads, *x, g.len());
                for (j, d) in dx.iter_mut().enumerate() {
                    *d += g[j] * y[j] * (F::one() - y[j]);
                }
            }
            Op::SoftmaxRows { x, rows, cols } => {
                let y: &[F] = &nodes[i].value;
                let dx = Self::acc(grads, *x, rows * cols);
                for r in 0..*rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s = kernels::dot(gr, yr);
                    for c in 0..*cols {
                        dx[r * cols + c] += yr[c] * (gr[c] - s);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, rows, cols, eps } => {
                let xv: &[F] = &nodes[*x].value;
                let gv: &[F] = &nodes[*gain].value;
                let inv_cols = F::from_f64(1.0 / *cols as f64);
                {
                    let dx = Self::acc(grads, *x, rows * cols);
                    for r in 0..*rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let (mu, var) = row_moments(row);
                        let s = (var + *eps).sqrt();
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for c in 0..*cols {
                            let xhat = (row[c] - mu) / s;
                            let dxh = g[r * cols + c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat;
                        }
                        mean_dxh *= inv_cols;
                        mean_dxh_xh *= inv_cols;
                        for c in 0..*cols {
                            let xhat = (row[c] - mu) / s;
                            let dxh = g[r * cols + c] * gv[c];
                            dx[r * cols + c] += (dxh - mean_dxh - xhat * mean_dxh_xh) / s;
                        }
                    }
                }
                {
                    let dg = Self::acc(grads, *gain, *cols);
                    for r in 0..*rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let (mu, var) = row_moments(row);
                        let s = (var + *eps).sqrt();
                        for c in 0..*cols {
                            let xhat = (row[c] - mu) / s;
                            dg[c] += g[r * cols + c] * xhat;
                        }
                    }
                }
                let db = Self::acc(grads, *bias, *cols);
                for r in 0..*rows {
                    for c in 0..*cols {
                        db[c] += g[r * cols + c];
                    }
                }
            }
            Op::ConcatCols { parts, rows, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    let dp = Self::acc(grads, *p, rows * w);
                    for r in 0..*rows {
                        for c in 0..w {
                            dp[r * w + c] += g[r * total + offset + c];
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, rows, cols, from, to } => {
                let w = to - from;
                let dx = Self::acc(grads, *x, rows * cols);
                for r in 0..*rows {
                    for c in 0..w {
                        dx[r * cols + from + c] += g[r * w + c];
                    }
                }
            }
            Op::StackRows { parts, cols } => {
                for (r, p) in parts.iter().enumerate() {
                    let dp = Self::acc(grads, *p, *cols);
                    kernels::axpy(F::one(), &g[r * cols..(r + 1) * cols], dp);
                }
            }
            Op::Reshape { x } => {
                kernels::axpy(F::one(), g, Self::acc(grads, *x, g.len()));
            }
            Op::SumAll { x } => {
                let dx = Self::acc(grads, *x, nodes[*x].value.len());
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::MeanAll { x } => {
                let len = nodes[*x].value.len();
                let inv = F::from_f64(1.0 / len as f64);
                let dx = Self::acc(grads, *x, len);
                for d in dx.iter_mut() {
                    *d += g[0] * inv;
                }
            }
            Op::Ln { x } => {
                let xv: &[F] = &nodes[*x].value;
                let dx = Self::acc(grads, *x, g.len());
                for (j, d) in dx.iter_mut().enumerate() {
                    *d += g[j] / xv[j];
                }
            }
            Op::Abs { x } => {
                let xv: &[F] = &nodes[*x].value;
                let dx = Self::acc(grads, *x, g.len());
                for (j, d) in dx.iter_mut().enumerate() {
                    if xv[j] > F::zero() {
                        *d += g[j];
                    } else if xv[j] < F::zero() {
                        *d -= g[j];
                    }
                }
            }
            Op::AsymmetricLoss { logits, targets, gamma_pos, gamma_neg, margin } => {
                let xv: &[F] = &nodes[*logits].value;
                let inv_n = F::from_f64(1.0 / targets.len() as f64);
                let tiny = F::from_f64(1e-12);
                let one = F::one();
                let dx = Self::acc(grads, *logits, xv.len());
                for (j, (&x, &y)) in xv.iter().zip(targets).enumerate() {
                    let p = x.stable_sigmoid();
                    let de = if y {
                        let pbar = if p > tiny { p } else { tiny };
                        (one - p).powf(*gamma_pos) * (*gamma_pos * p * pbar.ln() - (one - p))
                    } else {
                        let pm = p - *margin;
                        if pm > F::zero() {
                            let q0 = one - pm;
                            let q = if q0 > tiny { q0 } else { tiny };
                            let pprime = p * (one - p);
                            let focus = if *gamma_neg == F::zero() {
                                F::zero()
                            } else {
                                -*gamma_neg * pm.powf(*gamma_neg - one) * q.ln()
                            };
                            pprime * (focus + pm.powf(*gamma_neg) / q)
                        } else {
                            F::zero()
                        }
                    };
                    dx[j] += g[0] * de * inv_n;
                }
            }
            Op::CrossEntropyRows { logits, classes, rows, cols } => {
                let xv: &[F] = &nodes[*logits].value;
                let inv_n = F::from_f64(1.0 / *rows as f64);
                let dx = Self::acc(grads, *logits, rows * cols);
                for (r, &cl) in classes.iter().enumerate() {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let mx = row.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
                    let mut se = F::zero();
                    for &v in row {
                        se += (v - mx).exp();
                    }
                    for c in 0..*cols {
                        let soft = (row[c] - mx).exp() / se;
                        let ind = if c == cl { F::one() } else { F::zero() };
                        dx[r * cols + c] += g[0] * (soft - ind) * inv_n;
                    }
                }
            }
        }
    }
}

fn row_moments<F: Scalar>(row: &[F]) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mut mu = F::zero();
    for &v in row {
        mu += v;
    }
    mu /= n;
    let mut var = F::zero();
    for &v in row {
        let d = v - mu;
        var += d * d;
    }
    (mu, var / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, CoordSample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut tape = Tape::eval();
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.matmul(&eye, &a).unwrap();
        assert_eq!(y.data(), a.data());

        let u = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let v = Tensor::from_vec(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let z = tape.matmul(&u, &v).unwrap();
        assert_eq!(z.data(), &[0.0]);
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let mut tape = Tape::eval();
        let a = Tensor::<f64>::zeros(&[3, 4]);
        let b = Tensor::<f64>::zeros(&[5, 2]);
        assert!(matches!(tape.matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_matches_sum_of_products_oracle() {
        let a = randn(&[3, 4], 10);
        let b = randn(&[4, 2], 11);
        let mut tape = Tape::eval();
        let c = tape.matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv1x1_identity_kernel_and_hand_sum() {
        let mut tape = Tape::eval();
        let x = randn(&[4, 4, 3], 12);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let zero_b = Tensor::zeros(&[3]);
        let y = tape.conv1x1(&x, &eye, Some(&zero_b)).unwrap();
        assert_eq!(y.shape(), &[4, 4, 3]);
        assert_eq!(y.data(), x.data());

        // 1×1×2 input [1,2], w=[[1,1]], b=[0.5] → [3.5]
        let x = Tensor::from_vec(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        let y = tape.conv1x1(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn conv1x1_matches_unfold_oracle() {
        let x = randn(&[4, 4, 3], 13);
        let w = randn(&[5, 3], 14);
        let b = randn(&[5], 15);
        let mut tape = Tape::eval();
        let y = tape.conv1x1(&x, &w, Some(&b)).unwrap();
        // Unfold to HW×Cin and multiply by wᵀ per pixel.
        for p in 0..16 {
            for co in 0..5 {
                let mut s = b.data()[co];
                for ci in 0..3 {
                    s += x.data()[p * 3 + ci] * w.data()[co * 3 + ci];
                }
                assert!((y.data()[p * 5 + co] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::eval();
        let c = Tensor::full(&[3, 5, 2], 7.25);
        let y = tape.global_avg_pool(&c).unwrap();
        assert_eq!(y.data(), &[7.25, 7.25]);

        let two = Tensor::from_vec(vec![2, 1, 1], vec![0.0, 2.0]).unwrap();
        assert_eq!(tape.global_avg_pool(&two).unwrap().data(), &[1.0]);

        let x = randn(&[5, 7, 3], 16);
        let y = tape.global_avg_pool(&x).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for h in 0..5 {
                for w in 0..7 {
                    s += x.at3(h, w, c);
                }
            }
            assert!((y.data()[c] - s / 35.0).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::<f64>::eval();
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = tape.activation(&x, Activation::Relu).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let s = tape.activation(&Tensor::scalar(0.0), Activation::Sigmoid).unwrap();
        assert_eq!(s.item(), 0.5);
        let hi = tape.sigmoid(&Tensor::scalar(20.0)).unwrap();
        let lo = tape.sigmoid(&Tensor::scalar(-20.0)).unwrap();
        assert!((hi.item() - 1.0).abs() < 1e-8 && lo.item() < 1e-8);
    }

    #[test]
    fn softmax_rows_examples() {
        let mut tape = Tape::<f64>::eval();
        let z = Tensor::zeros(&[1, 3]);
        let y = tape.softmax_rows(&z).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::from_vec(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let y = tape.softmax_rows(&big).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-12);

        let x = randn(&[6, 5], 17);
        let y = tape.softmax_rows(&x).unwrap();
        for r in 0..6 {
            let s: f64 = y.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = randn(&[4, 6], 18);
        let shifted = x.map(|v| v + 123.456);
        let mut tape = Tape::eval();
        let a = tape.softmax_rows(&x).unwrap();
        let b = tape.softmax_rows(&shifted).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::eval();
        let ones_gain = Tensor::full(&[4], 1.0);
        let zero_bias = Tensor::zeros(&[4]);
        // Constant token → zeros (variance absorbed by eps).
        let c = Tensor::full(&[1, 4], 3.0);
        let y = tape.layer_norm(&c, &ones_gain, &zero_bias, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-12);
        }
        // Already-normalized token stays put as eps → 0.
        let g2 = Tensor::full(&[2], 1.0);
        let b2 = Tensor::zeros(&[2]);
        let t = Tensor::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = tape.layer_norm(&t, &g2, &b2, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-10 && (y.data()[1] + 1.0).abs() < 1e-10);

        // Moment check on random tokens.
        let x = randn(&[5, 8], 19);
        let g8 = Tensor::full(&[8], 1.0);
        let b8 = Tensor::zeros(&[8]);
        let y = tape.layer_norm(&x, &g8, &b8, 1e-5).unwrap();
        for r in 0..5 {
            let row = &y.data()[r * 8..(r + 1) * 8];
            let mu: f64 = row.iter().sum::<f64>() / 8.0;
            assert!(mu.abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_shift_invariance() {
        let x = randn(&[3, 8], 20);
        let shifted = x.map(|v| v + 55.0);
        let g = Tensor::full(&[8], 1.0);
        let b = Tensor::zeros(&[8]);
        let mut tape = Tape::eval();
        let a = tape.layer_norm(&x, &g, &b, 1e-5).unwrap();
        let c = tape.layer_norm(&shifted, &g, &b, 1e-5).unwrap();
        for (p, q) in a.data().iter().zip(c.data()) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::eval();
        let single = randn(&[2, 2, 3], 21);
        let y = tape.concat_channels(&[&single]).unwrap();
        assert_eq!(y.data(), single.data());

        let a = Tensor::from_vec(vec![1, 1, 1], vec![4.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 1, 1], vec![9.0]).unwrap();
        let y = tape.concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.data(), &[4.0, 9.0]);

        let parts: Vec<Tensor<f64>> = (0..6).map(|i| randn(&[3, 3, 4], 22 + i)).collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let y = tape.concat_channels(&refs).unwrap();
        assert_eq!(y.shape(), &[3, 3, 24]);
        for (m, p) in parts.iter().enumerate() {
            let s = tape.slice_channels(&y, m * 4, (m + 1) * 4).unwrap();
            assert_eq!(s.data(), p.data());
        }

        let bad = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert!(tape.concat_channels(&[&parts[0], &bad]).is_err());
    }

    #[test]
    fn concat_gradient_slices_back_exactly() {
        let parts: Vec<Tensor<f64>> = (0..3).map(|i| randn(&[2, 2, 2], 30 + i)).collect();
        let weights = randn(&[2, 2, 6], 33);
        let mut tape = Tape::new();
        let tracked: Vec<Tensor<f64>> =
            parts.iter().map(|p| tape.input(p).unwrap()).collect();
        let refs: Vec<&Tensor<f64>> = tracked.iter().collect();
        let y = tape.concat_channels(&refs).unwrap();
        let wy = tape.mul(&y, &weights).unwrap();
        let loss = tape.sum(&wy).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // d loss / d part m = the matching channel slice of `weights`.
        for (m, t) in tracked.iter().enumerate() {
            let g = grads.wrt(t).unwrap();
            for p in 0..4 {
                for c in 0..2 {
                    assert_eq!(g[p * 2 + c], weights.data()[p * 6 + m * 2 + c]);
                }
            }
        }
    }

    #[test]
    fn hadamard_examples() {
        let mut tape = Tape::eval();
        let a = Tensor::from_vec(vec![2], vec![2.0, 3.0]).unwrap();
        let ones = Tensor::full(&[2], 1.0);
        assert_eq!(tape.hadamard(&a, &ones).unwrap().data(), a.data());
        let b = Tensor::from_vec(vec![2], vec![4.0, 5.0]).unwrap();
        assert_eq!(tape.hadamard(&a, &b).unwrap().data(), &[8.0, 15.0]);

        // Channel-vector broadcast equals explicit tiling.
        let x = randn(&[3, 2, 4], 40);
        let v = randn(&[4], 41);
        let tiled = Tensor::from_fn(&[3, 2, 4], |i| v.data()[i % 4]);
        let via_bcast = tape.hadamard(&x, &v).unwrap();
        let via_tile = tape.mul(&x, &tiled).unwrap();
        assert_eq!(via_bcast.data(), via_tile.data());

        let bad = Tensor::<f64>::zeros(&[3]);
        assert!(tape.hadamard(&x, &bad).is_err());
    }

    #[test]
    fn backward_linear_functional_is_ones() {
        let x = randn(&[2, 3, 2], 50);
        let mut tape = Tape::new();
        let t = tape.input(&x).unwrap();
        let loss = tape.sum(&t).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.wrt(&t).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_sigmoid_at_zero_is_quarter() {
        let w = Tensor::<f64>::scalar(0.0);
        let mut tape = Tape::new();
        let t = tape.input(&w).unwrap();
        let s = tape.sigmoid(&t).unwrap();
        let loss = tape.sum(&s).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!((grads.wrt(&t).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let x = randn(&[2, 2], 51);
        let mut tape = Tape::new();
        let t = tape.input(&x).unwrap();
        let y = tape.mul(&t, &t).unwrap();
        let tape2 = Tape::<f64>::new();
        assert!(matches!(tape2.backward(&y), Err(Error::DetachedTensor) | Err(Error::NonScalarLoss { .. })));
        assert!(matches!(tape.backward(&y), Err(Error::NonScalarLoss { .. })));

        let mut tape3 = Tape::new();
        let loss = tape3.sum(&x).unwrap(); // untracked input → detached loss
        assert!(matches!(tape3.backward(&loss), Err(Error::DetachedTensor)));
    }

    #[test]
    fn division_by_zero_is_an_error_state() {
        let mut tape = Tape::eval();
        let a = Tensor::scalar(1.0);
        let b = Tensor::scalar(0.0);
        assert!(matches!(tape.div(&a, &b), Err(Error::NonFinite { .. })));
    }

    // ------------------------------------------------------------------
    // Per-primitive gradient checks: eps = 1e-6, tolerance 1e-5, random
    // 64-bit inputs of dims ≤ 8.
    // ------------------------------------------------------------------

    fn check(f: &crate::tensor::gradcheck::ScalarFn<f64>, theta: &Tensor<f64>) {
        let err = grad_check(f, theta, 1e-6, CoordSample::All).unwrap();
        assert!(err < 1e-5, "gradient check failed: max rel err {err}");
    }

    #[test]
    fn grad_matmul() {
        let b = randn(&[4, 3], 60);
        let f = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let y = tape.matmul(x, &b)?;
            let sq = tape.mul(&y, &y)?;
            tape.sum(&sq)
        };
        check(&f, &randn(&[2, 4], 61));

        // Gradient must also flow to the right operand.
        let a = randn(&[2, 4], 62);
        let g = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let y = tape.matmul(&a, x)?;
            let sq = tape.mul(&y, &y)?;
            tape.sum(&sq)
        };
        check(&g, &randn(&[4, 3], 63));
    }

    #[test]
    fn grad_matmul_nt() {
        let b = randn(&[5, 4], 64);
        let f = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let y = tape.matmul_nt(x, &b)?;
            let sq = tape.mul(&y, &y)?;
            tape.sum(&sq)
        };
        check(&f, &randn(&[3, 4], 65));
        let a = randn(&[3, 4], 66);
        let g = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let y = tape.matmul_nt(&a, x)?;
            let sq = tape.mul(&y, &y)?;
            tape.sum(&sq)
        };
        check(&g, &randn(&[5, 4], 67));
    }

    #[test]
    fn grad_conv1x1_all_inputs() {
        let x = randn(&[3, 3, 4], 68);
        let w = randn(&[2, 4], 69);
        let b = randn(&[2], 70);
        let (x2, w2, b2) = (x.clone(), w.clone(), b.clone());
        let fx = move |tape: &mut Tape<f64>, t: &Tensor<f64>| {
            let y = tape.conv1x1(t, &w, Some(&b))?;
            let sq = tape.mul(&y, &y)?;
            tape.sum(&sq)
        };
        check(&fx, &x);
        let x3 = x2.clone();
        let b3 = b2.clone();
        let fw = move |tape: &mut Tape<f64>, t: &Tensor<f64>| {
            let y = tape.conv1x1(&x3, t, Some(&b3))?;
            let sq = tape.mul(&y, &y)?;
            tape.sum(&sq)
        };
        check(&fw, &w2);
        let w4 = randn(&[2, 4], 71);
        let fb = move |tape: &mut Tape<f64>, t: &Tensor<f64>| {
            let y = tape.conv1x1(&x2, &w4, Some(t))?;
            let sq = tape.mul(&y, &y)?;
            tape.sum(&sq)
        };
        check(&fb, &b2);
    }

    #[test]
    fn grad_pool_activations_softmax() {
        let f = |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let p = tape.global_avg_pool(x)?;
            let sq = tape.mul(&p, &p)?;
            tape.sum(&sq)
        };
        check(&f, &randn(&[4, 4, 3], 72));

        let f = |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let r = tape.relu(x)?;
            let s = tape.sigmoid(&r)?;
            tape.sum(&s)
        };
        // Keep values away from the relu kink.
        let theta = randn(&[8], 73).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        check(&f, &theta);

        let w = randn(&[3, 5], 74);
        let f = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let s = tape.softmax_rows(x)?;
            let weighted = tape.mul(&s, &w)?;
            tape.sum(&weighted)
        };
        check(&f, &randn(&[3, 5], 75));
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        let gain = randn(&[6], 76);
        let bias = randn(&[6], 77);
        let x = randn(&[3, 6], 78);
        let w = randn(&[3, 6], 79);
        let (g2, b2, x2, w2) = (gain.clone(), bias.clone(), x.clone(), w.clone());
        let fx = move |tape: &mut Tape<f64>, t: &Tensor<f64>| {
            let y = tape.layer_norm(t, &gain, &bias, 1e-5)?;
            let weighted = tape.mul(&y, &w)?;
            tape.sum(&weighted)
        };
        check(&fx, &x);
        let (x3, w3, b3) = (x2.clone(), w2.clone(), b2.clone());
        let fg = move |tape: &mut Tape<f64>, t: &Tensor<f64>| {
            let y = tape.layer_norm(&x3, t, &b3, 1e-5)?;
            let weighted = tape.mul(&y, &w3)?;
            tape.sum(&weighted)
        };
        check(&fg, &g2.clone());
        let fb = move |tape: &mut Tape<f64>, t: &Tensor<f64>| {
            let y = tape.layer_norm(&x2, &g2, t, 1e-5)?;
            let weighted = tape.mul(&y, &w2)?;
            tape.sum(&weighted)
        };
        check(&fb, &b2);
    }

    #[test]
    fn grad_elementwise_and_reductions() {
        let b = randn(&[6], 80).map(|v| v + 3.0); // keep divisor away from 0
        let f = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let d = tape.div(x, &b)?;
            let s = tape.scale(&d, 2.5)?;
            let sh = tape.add_scalar(&s, 1.0)?;
            tape.mean(&sh)
        };
        check(&f, &randn(&[6], 81));

        let f = |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let a = tape.abs(x)?;
            tape.sum(&a)
        };
        // Stay away from the |·| kink at 0.
        let theta = randn(&[8], 82).map(|v| if v.abs() < 0.05 { v + 0.3 } else { v });
        check(&f, &theta);

        let f = |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let l = tape.ln(x)?;
            tape.sum(&l)
        };
        check(&f, &randn(&[5], 83).map(|v| v.abs() + 0.5));

        let v = randn(&[4], 84);
        let f = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let h = tape.hadamard(x, &v)?;
            let sq = tape.mul(&h, &h)?;
            tape.sum(&sq)
        };
        check(&f, &randn(&[3, 2, 4], 85));

        let v2 = randn(&[4], 86);
        let f = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let h = tape.add_row_vec(x, &v2)?;
            let sq = tape.mul(&h, &h)?;
            tape.sum(&sq)
        };
        check(&f, &randn(&[5, 4], 87));
    }

    #[test]
    fn grad_stack_and_slice() {
        let f = |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let s = tape.slice_channels(x, 1, 3)?;
            let sq = tape.mul(&s, &s)?;
            tape.sum(&sq)
        };
        check(&f, &randn(&[2, 2, 4], 88));

        let other = randn(&[3], 89);
        let f = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let o = tape.input(&other)?;
            let m = tape.stack_rows(&[x, &o])?;
            let sq = tape.mul(&m, &m)?;
            tape.sum(&sq)
        };
        check(&f, &randn(&[3], 90));
    }

    #[test]
    fn grad_fused_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let targets: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.4)).collect();
        let t2 = targets.clone();
        let f = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            tape.asymmetric_loss(x, &t2, 0.0, 4.0, 0.05)
        };
        check(&f, &randn(&[3, 4], 92).map(|v| v * 2.0));

        let t3 = targets.clone();
        let f = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            tape.asymmetric_loss(x, &t3, 1.0, 2.0, 0.0)
        };
        check(&f, &randn(&[3, 4], 93).map(|v| v * 2.0));

        let classes = vec![0usize, 3, 2];
        let f = move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            tape.cross_entropy_rows(x, &classes)
        };
        check(&f, &randn(&[3, 4], 94).map(|v| v * 3.0));
    }

    #[test]
    fn tape_len_counts_recorded_applications() {
        let x = randn(&[2, 2], 95);
        let mut tape = Tape::new();
        let t = tape.input(&x).unwrap();
        let _ = tape.mul(&t, &t).unwrap();
        assert_eq!(tape.len(), 2);
        let mut eval = Tape::eval();
        let u = eval.input(&x).unwrap();
        let _ = eval.mul(&u, &u).unwrap();
        assert_eq!(eval.len(), 0);
    }
}
