//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The design is a classic Wengert tape specialised to the handful of kernels
//! the rest of the crate needs: elementwise arithmetic, `exp`/`relu`,
//! numerically stable log-sum-exp reductions, rank-2 matrix products, axis
//! permutation, row gathering (with scatter-add gradients), concatenation,
//! reshape, and an explicit broadcast that repeats a tensor along one new
//! axis.  There is deliberately no implicit shape coercion beyond
//! scalar-with-tensor: every gradient rule stays small enough to audit by
//! hand.
//!
//! Tensors are immutable.  A tensor either lives off-tape (a constant; cheap
//! to clone, shares storage) or carries a handle to the tape node that
//! produced it.  Mixing operands from two different tapes is an error.  The
//! tape is single-threaded by construction (`Rc`-based); computations that
//! must not record gradients simply use constant tensors and the exact same
//! operation code paths.
//!
//! `backward` walks the tape once in reverse topological order (creation
//! order is already topological) and accumulates gradients with a fixed
//! summation order, so two backward passes over the same tape agree
//! bit-for-bit.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

/// Errors from tensor construction or operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("operand shapes {lhs:?} and {rhs:?} are incompatible for {op}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} is out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("{op} requires a rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid permutation {axes:?} for shape {shape:?}")]
    InvalidPermutation { axes: Vec<usize>, shape: Vec<usize> },
    #[error("gather index {index} out of range for axis extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("reshape from {from:?} to {to:?} changes element count")]
    ReshapeMismatch { from: Vec<usize>, to: Vec<usize> },
    #[error("elementwise division hit a zero divisor")]
    DivisionByZero,
    #[error("operands belong to two different tapes")]
    TapeMismatch,
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward requires a tensor recorded on a tape")]
    NotOnTape,
}

type Result<T> = std::result::Result<T, TensorError>;

// ---------------------------------------------------------------------------
// Tape internals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Relu(usize),
    Scale(usize, f64),
    LogSumExp {
        a: usize,
        axis: usize,
    },
    SumAll(usize),
    MatMul(usize, usize),
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Gather {
        a: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    Reshape(usize),
    Broadcast {
        a: usize,
        axis: usize,
        n: usize,
    },
}

struct Record {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Op,
}

struct TapeInner {
    records: Vec<Record>,
}

/// A recording of a differentiable computation.
///
/// Cloning a `Tape` yields another handle to the same recording.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                records: Vec::new(),
            })),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.inner.borrow().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, shape: Vec<usize>, data: Arc<Vec<f64>>, op: Op) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.records.push(Record { shape, data, op });
        inner.records.len() - 1
    }

    /// Register a leaf (differentiable input) on this tape.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(t.shape.clone(), Arc::clone(&t.data), Op::Leaf);
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Convenience: build a leaf directly from shape and data.
    pub fn leaf_from(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Ok(self.leaf(&Tensor::from_vec(shape, data)?))
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// A dense row-major `f64` tensor, optionally attached to a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("on_tape", &self.node.is_some())
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a constant tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expected = numel_of(shape);
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; numel_of(shape)]).expect("zeros")
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(shape, vec![value; numel_of(shape)]).expect("filled")
    }

    /// A rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[], vec![value]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Identifier of the tape node that produced this tensor, if any.
    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    /// A copy detached from any tape (shares storage).
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    fn is_scalar_like(&self) -> bool {
        self.numel() == 1
    }
}

// ---------------------------------------------------------------------------
// Operation plumbing
// ---------------------------------------------------------------------------

/// Resolve the tape (if any) an operation should record on, ensuring both
/// operands agree, and return the operands' node ids on that tape
/// (constants are appended as leaves).
fn join_tape(a: &Tensor, b: &Tensor) -> Result<Option<(Tape, usize, usize)>> {
    match (&a.node, &b.node) {
        (Some(na), Some(nb)) => {
            if !na.tape.same_tape(&nb.tape) {
                return Err(TensorError::TapeMismatch);
            }
            Ok(Some((na.tape.clone(), na.id, nb.id)))
        }
        (Some(na), None) => {
            let id_b = na.tape.push(b.shape.clone(), Arc::clone(&b.data), Op::Leaf);
            Ok(Some((na.tape.clone(), na.id, id_b)))
        }
        (None, Some(nb)) => {
            let id_a = nb.tape.push(a.shape.clone(), Arc::clone(&a.data), Op::Leaf);
            Ok(Some((nb.tape.clone(), id_a, nb.id)))
        }
        (None, None) => Ok(None),
    }
}

fn record_unary(a: &Tensor, shape: Vec<usize>, data: Vec<f64>, op: impl Fn(usize) -> Op) -> Tensor {
    let data = Arc::new(data);
    let node = a.node.as_ref().map(|na| {
        let id = na.tape.push(shape.clone(), Arc::clone(&data), op(na.id));
        NodeRef {
            tape: na.tape.clone(),
            id,
        }
    });
    Tensor { shape, data, node }
}

fn record_binary(
    a: &Tensor,
    b: &Tensor,
    shape: Vec<usize>,
    data: Vec<f64>,
    op: impl Fn(usize, usize) -> Op,
) -> Result<Tensor> {
    let data = Arc::new(data);
    let node = match join_tape(a, b)? {
        Some((tape, ia, ib)) => {
            let id = tape.push(shape.clone(), Arc::clone(&data), op(ia, ib));
            Some(NodeRef { tape, id })
        }
        None => None,
    };
    Ok(Tensor { shape, data, node })
}

/// Elementwise binary kernel with scalar-with-tensor broadcasting.
fn zip_elementwise(
    op_name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((a.shape.clone(), data))
    } else if b.is_scalar_like() {
        let y = b.data[0];
        Ok((a.shape.clone(), a.data.iter().map(|&x| f(x, y)).collect()))
    } else if a.is_scalar_like() {
        let x = a.data[0];
        Ok((b.shape.clone(), b.data.iter().map(|&y| f(x, y)).collect()))
    } else {
        Err(TensorError::ShapeMismatch {
            op: op_name,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

/// Iteration strides for reducing/broadcasting along one axis: returns
/// (outer, extent, inner) so that flat index = (o * extent + e) * inner + i.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_elementwise("add", self, other, |x, y| x + y)?;
        record_binary(self, other, shape, data, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_elementwise("sub", self, other, |x, y| x - y)?;
        record_binary(self, other, shape, data, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = zip_elementwise("mul", self, other, |x, y| x * y)?;
        record_binary(self, other, shape, data, Op::Mul)
    }

    /// Elementwise division.  Any exactly-zero divisor element is a domain
    /// error rather than a silent `inf`/`nan`.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data.contains(&0.0) {
            return Err(TensorError::DivisionByZero);
        }
        let (shape, data) = zip_elementwise("div", self, other, |x, y| x / y)?;
        record_binary(self, other, shape, data, Op::Div)
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data.iter().map(|&x| -x).collect();
        record_unary(self, self.shape.clone(), data, Op::Neg)
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data.iter().map(|&x| x.exp()).collect();
        record_unary(self, self.shape.clone(), data, Op::Exp)
    }

    /// Rectified linear unit; the subgradient at 0 is taken to be 0.
    pub fn relu(&self) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        record_unary(self, self.shape.clone(), data, Op::Relu)
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|&x| c * x).collect();
        record_unary(self, self.shape.clone(), data, |a| Op::Scale(a, c))
    }

    /// Log-sum-exp reduction along `axis` (the axis is removed from the
    /// shape).  Computed with the max-shift so large magnitudes stay finite.
    pub fn logsumexp(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: self.shape.clone(),
            });
        }
        let (outer, extent, inner) = axis_split(&self.shape, axis);
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for e in 0..extent {
                    m = m.max(self.data[(o * extent + e) * inner + i]);
                }
                let mut s = 0.0;
                for e in 0..extent {
                    s += (self.data[(o * extent + e) * inner + i] - m).exp();
                }
                out[o * inner + i] = m + s.ln();
            }
        }
        Ok(record_unary(self, out_shape, out, |a| Op::LogSumExp {
            a,
            axis,
        }))
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data.iter().sum();
        record_unary(self, vec![], vec![s], Op::SumAll)
    }

    /// Rank-2 matrix product: `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        if other.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: other.shape.clone(),
            });
        }
        if self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let data = matmul_kernel(&self.data, &other.data, m, k, n);
        record_binary(self, other, vec![m, n], data, Op::MatMul)
    }

    /// Reorder axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true))
        {
            return Err(TensorError::InvalidPermutation {
                axes: axes.to_vec(),
                shape: self.shape.clone(),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| self.shape[ax]).collect();
        let data = permute_kernel(&self.data, &self.shape, axes);
        let axes_owned = axes.to_vec();
        Ok(record_unary(self, out_shape, data, move |a| Op::Permute {
            a,
            axes: axes_owned.clone(),
        }))
    }

    /// Select slices along `axis` by index, in order (repeats allowed).
    /// The gradient scatter-adds back, so repeated indices accumulate.
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: self.shape.clone(),
            });
        }
        let (outer, extent, inner) = axis_split(&self.shape, axis);
        for &ix in indices {
            if ix >= extent {
                return Err(TensorError::IndexOutOfRange { index: ix, extent });
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = indices.len();
        let mut out = vec![0.0; outer * indices.len() * inner];
        for o in 0..outer {
            for (e_out, &ix) in indices.iter().enumerate() {
                let src = (o * extent + ix) * inner;
                let dst = (o * indices.len() + e_out) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        let idx = indices.to_vec();
        Ok(record_unary(self, out_shape, out, move |a| Op::Gather {
            a,
            axis,
            indices: idx.clone(),
        }))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&self, other: &Tensor, axis: usize) -> Result<Tensor> {
        let rank = self.shape.len();
        if other.shape.len() != rank || axis >= rank {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for d in 0..rank {
            if d != axis && self.shape[d] != other.shape[d] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape.clone(),
                    rhs: other.shape.clone(),
                });
            }
        }
        let (outer, ea, inner) = axis_split(&self.shape, axis);
        let eb = other.shape[axis];
        let mut out_shape = self.shape.clone();
        out_shape[axis] = ea + eb;
        let mut out = vec![0.0; outer * (ea + eb) * inner];
        for o in 0..outer {
            let dst = o * (ea + eb) * inner;
            out[dst..dst + ea * inner]
                .copy_from_slice(&self.data[o * ea * inner..(o + 1) * ea * inner]);
            out[dst + ea * inner..dst + (ea + eb) * inner]
                .copy_from_slice(&other.data[o * eb * inner..(o + 1) * eb * inner]);
        }
        record_binary(self, other, out_shape, out, |a, b| Op::Concat {
            a,
            b,
            axis,
        })
    }

    /// Reinterpret the buffer with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ReshapeMismatch {
                from: self.shape.clone(),
                to: shape.to_vec(),
            });
        }
        let out = self.data.as_ref().clone();
        Ok(record_unary(self, shape.to_vec(), out, Op::Reshape))
    }

    /// Repeat the tensor along a new axis inserted at `axis`, extent `n`.
    /// The gradient sums over that axis.  E.g. a length-`r` vector broadcast
    /// at axis 1 with extent `c` becomes an `r x c` matrix of repeated
    /// columns.
    pub fn broadcast_axis(&self, axis: usize, n: usize) -> Result<Tensor> {
        if axis > self.shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: self.shape.clone(),
            });
        }
        let mut out_shape = self.shape.clone();
        out_shape.insert(axis, n);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis..].iter().product();
        let mut out = vec![0.0; outer * n * inner];
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for e in 0..n {
                let dst = (o * n + e) * inner;
                out[dst..dst + inner].copy_from_slice(src);
            }
        }
        Ok(record_unary(self, out_shape, out, move |a| Op::Broadcast {
            a,
            axis,
            n,
        }))
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += aip * b_row[j];
            }
        }
    }
    out
}

fn permute_kernel(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    // Strides of the input, re-ordered to the output's axis order.
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let total = data.len();
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * strides[d];
        }
        *slot = data[src];
        // Odometer increment over the output shape.
        let _ = flat;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Gradients of a scalar root with respect to tape nodes, keyed by node id.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    /// Gradient with respect to the node that produced `t`, if both `t` is on
    /// the tape and gradient flowed to it.
    pub fn wrt(&self, t: &Tensor) -> Option<&Tensor> {
        let id = t.node_id()?;
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn by_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

/// Accumulate `g` (shaped like the op output) into the gradient of a possibly
/// scalar-like operand: if the operand was scalar-broadcast, its gradient is
/// the sum of the pointwise contributions.
fn accum_operand(slot: &mut [f64], operand_len: usize, contrib: impl Iterator<Item = f64>) {
    if slot.len() != operand_len {
        unreachable!("gradient buffer sized at init");
    }
    if operand_len == 1 {
        slot[0] += contrib.sum::<f64>();
    } else {
        for (dst, c) in slot.iter_mut().zip(contrib) {
            *dst += c;
        }
    }
}

/// Run reverse-mode accumulation from a scalar root.
///
/// Returns gradients for every tape node reachable from the root, including
/// intermediates; leaves the tape unchanged, so repeated calls return
/// bit-identical results.
pub fn backward(root: &Tensor) -> Result<GradMap> {
    let node = root.node.as_ref().ok_or(TensorError::NotOnTape)?;
    if root.numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: root.shape.clone(),
        });
    }
    let inner = node.tape.inner.borrow();
    let records = &inner.records;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; records.len()];
    grads[node.id] = Some(vec![1.0]);

    // Ensure-allocated helper (two-phase to placate the borrow checker).
    fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    for id in (0..=node.id).rev() {
        let g = match grads[id].clone() {
            Some(g) => g,
            None => continue,
        };
        let rec = &records[id];
        match &rec.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (la, lb) = (records[*a].data.len(), records[*b].data.len());
                accum_operand(slot(&mut grads, *a, la), la, g.iter().copied());
                accum_operand(slot(&mut grads, *b, lb), lb, g.iter().copied());
            }
            Op::Sub(a, b) => {
                let (la, lb) = (records[*a].data.len(), records[*b].data.len());
                accum_operand(slot(&mut grads, *a, la), la, g.iter().copied());
                accum_operand(slot(&mut grads, *b, lb), lb, g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let da = Arc::clone(&records[*a].data);
                let db = Arc::clone(&records[*b].data);
                let (la, lb) = (da.len(), db.len());
                let pick = |v: &Arc<Vec<f64>>, i: usize| if v.len() == 1 { v[0] } else { v[i] };
                accum_operand(
                    slot(&mut grads, *a, la),
                    la,
                    g.iter().enumerate().map(|(i, &x)| x * pick(&db, i)),
                );
                accum_operand(
                    slot(&mut grads, *b, lb),
                    lb,
                    g.iter().enumerate().map(|(i, &x)| x * pick(&da, i)),
                );
            }
            Op::Div(a, b) => {
                let da = Arc::clone(&records[*a].data);
                let db = Arc::clone(&records[*b].data);
                let (la, lb) = (da.len(), db.len());
                let pick = |v: &Arc<Vec<f64>>, i: usize| if v.len() == 1 { v[0] } else { v[i] };
                accum_operand(
                    slot(&mut grads, *a, la),
                    la,
                    g.iter().enumerate().map(|(i, &x)| x / pick(&db, i)),
                );
                accum_operand(
                    slot(&mut grads, *b, lb),
                    lb,
                    g.iter()
                        .enumerate()
                        .map(|(i, &x)| -x * pick(&da, i) / (pick(&db, i) * pick(&db, i))),
                );
            }
            Op::Neg(a) => {
                let la = records[*a].data.len();
                accum_operand(slot(&mut grads, *a, la), la, g.iter().map(|&x| -x));
            }
            Op::Exp(a) => {
                let out = Arc::clone(&rec.data);
                let la = records[*a].data.len();
                accum_operand(
                    slot(&mut grads, *a, la),
                    la,
                    g.iter().zip(out.iter()).map(|(&x, &y)| x * y),
                );
            }
            Op::Relu(a) => {
                let input = Arc::clone(&records[*a].data);
                let la = input.len();
                accum_operand(
                    slot(&mut grads, *a, la),
                    la,
                    g.iter()
                        .zip(input.iter())
                        .map(|(&x, &v)| if v > 0.0 { x } else { 0.0 }),
                );
            }
            Op::Scale(a, c) => {
                let la = records[*a].data.len();
                let c = *c;
                accum_operand(slot(&mut grads, *a, la), la, g.iter().map(|&x| c * x));
            }
            Op::LogSumExp { a, axis } => {
                // d lse / d x = softmax(x) along the reduced axis.
                let input = Arc::clone(&records[*a].data);
                let out = Arc::clone(&rec.data);
                let in_shape = records[*a].shape.clone();
                let (outer, extent, inner_len) = axis_split(&in_shape, *axis);
                let la = input.len();
                let ga = slot(&mut grads, *a, la);
                for o in 0..outer {
                    for i in 0..inner_len {
                        let lse = out[o * inner_len + i];
                        let gv = g[o * inner_len + i];
                        for e in 0..extent {
                            let src = (o * extent + e) * inner_len + i;
                            ga[src] += gv * (input[src] - lse).exp();
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let la = records[*a].data.len();
                let gv = g[0];
                accum_operand(slot(&mut grads, *a, la), la, std::iter::repeat_n(gv, la));
            }
            Op::MatMul(a, b) => {
                let da = Arc::clone(&records[*a].data);
                let db = Arc::clone(&records[*b].data);
                let (m, k) = (records[*a].shape[0], records[*a].shape[1]);
                let n = records[*b].shape[1];
                // dA = G @ B^T
                {
                    let ga = slot(&mut grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * db[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                // dB = A^T @ G
                {
                    let gb = slot(&mut grads, *b, k * n);
                    for p in 0..k {
                        for i in 0..m {
                            let aip = da[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Permute { a, axes } => {
                // Gradient flows through the inverse permutation.
                let mut inv = vec![0usize; axes.len()];
                for (d, &ax) in axes.iter().enumerate() {
                    inv[ax] = d;
                }
                let back = permute_kernel(&g, &rec.shape, &inv);
                let la = records[*a].data.len();
                accum_operand(slot(&mut grads, *a, la), la, back.into_iter());
            }
            Op::Gather { a, axis, indices } => {
                let in_shape = records[*a].shape.clone();
                let (outer, extent, inner_len) = axis_split(&in_shape, *axis);
                let la = records[*a].data.len();
                let ga = slot(&mut grads, *a, la);
                for o in 0..outer {
                    for (e_out, &ix) in indices.iter().enumerate() {
                        let src = (o * indices.len() + e_out) * inner_len;
                        let dst = (o * extent + ix) * inner_len;
                        for i in 0..inner_len {
                            ga[dst + i] += g[src + i];
                        }
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let sa = records[*a].shape.clone();
                let sb = records[*b].shape.clone();
                let (outer, ea, inner_len) = axis_split(&sa, *axis);
                let eb = sb[*axis];
                {
                    let ga = slot(&mut grads, *a, records[*a].data.len());
                    for o in 0..outer {
                        let src = o * (ea + eb) * inner_len;
                        for x in 0..ea * inner_len {
                            ga[o * ea * inner_len + x] += g[src + x];
                        }
                    }
                }
                {
                    let gb = slot(&mut grads, *b, records[*b].data.len());
                    for o in 0..outer {
                        let src = o * (ea + eb) * inner_len + ea * inner_len;
                        for x in 0..eb * inner_len {
                            gb[o * eb * inner_len + x] += g[src + x];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let la = records[*a].data.len();
                accum_operand(slot(&mut grads, *a, la), la, g.iter().copied());
            }
            Op::Broadcast { a, axis, n } => {
                let in_shape = records[*a].shape.clone();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner_len: usize = in_shape[*axis..].iter().product();
                let la = records[*a].data.len();
                let ga = slot(&mut grads, *a, la);
                for o in 0..outer {
                    for e in 0..*n {
                        let src = (o * n + e) * inner_len;
                        for i in 0..inner_len {
                            ga[o * inner_len + i] += g[src + i];
                        }
                    }
                }
            }
        }
    }

    let out = grads
        .into_iter()
        .enumerate()
        .map(|(id, g)| {
            g.map(|data| Tensor {
                shape: records[id].shape.clone(),
                data: Arc::new(data),
                node: None,
            })
        })
        .collect();
    Ok(GradMap { grads: out })
}
