//! Reverse-mode automatic differentiation on an arena of graph nodes.
//!
//! A [`Graph`] is an append-only arena: every operation pushes a [`Node`]
//! holding its op tag, parent ids, and eagerly computed value. Creation order
//! is a topological order by construction (parents always precede children),
//! which keeps the backward sweep a single reverse pass.
//!
//! The backward pass *emits graph nodes* for every adjoint instead of
//! accumulating plain buffers. Calling [`Graph::grad`] with `create_graph`
//! set therefore returns gradients that are themselves differentiable, and a
//! second `grad` through them yields exact second-order derivatives — the
//! property the outer-loop meta-updates rely on. With `create_graph` unset
//! the returned gradients are detached constants.
//!
//! There is no global tape: each graph is an owned value, so nested
//! differentiation is a pure function of its inputs and independent graphs
//! can live on separate threads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Shape, Tensor};

/// Index of a node within its owning [`Graph`].
pub type NodeId = usize;

/// Errors from graph construction and differentiation.
#[derive(Clone, Debug, PartialEq)]
pub enum DiffError {
    /// Operand shapes do not conform for the named op.
    ShapeMismatch { op: &'static str, details: String },
    /// `grad` was asked to differentiate a non-scalar quantity.
    NonScalarLoss { shape: Shape },
    /// `grad` target is not a leaf of the graph.
    NotALeaf { id: NodeId },
    /// A finite-difference probe returned a non-finite value.
    NonFiniteProbe,
}

impl core::fmt::Display for DiffError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DiffError::ShapeMismatch { op, details } => {
                write!(f, "shape mismatch in {op}: {details}")
            }
            DiffError::NonScalarLoss { shape } => {
                write!(f, "grad needs a scalar loss, got shape {shape}")
            }
            DiffError::NotALeaf { id } => {
                write!(f, "grad target node {id} is not a leaf")
            }
            DiffError::NonFiniteProbe => write!(f, "finite-difference probe was not finite"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for DiffError {}

/// Operation tag. Parents are stored inline; constants needed by the op
/// (scale factors, clip bounds, slice offsets) ride along with the tag.
#[derive(Clone, Copy, Debug)]
pub enum Op {
    /// Input node: parameter or constant, set apart by `requires_grad`.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    /// C = A B, A: [m,k], B: [k,n].
    MatMul(NodeId, NodeId),
    /// C = A Bᵀ, A: [m,k], B: [n,k].
    MatMulNt(NodeId, NodeId),
    /// C = Aᵀ B, A: [k,m], B: [k,n].
    MatMulTn(NodeId, NodeId),
    /// x · c for a compile-time-known constant c.
    Scale(NodeId, f64),
    /// x + c elementwise.
    Offset(NodeId, f64),
    /// Tensor times a rank-0 graph node (used for learned learning rates).
    ScaleBy(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Square(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    /// min(x, cap) elementwise; gradient is zero at and beyond the cap.
    ClipMax(NodeId, f64),
    /// Sum of all elements, to a rank-0 scalar.
    Sum(NodeId),
    /// [m,n] -> [n], summing down each column.
    SumRows(NodeId),
    /// [m,n] -> [m], summing across each row.
    SumCols(NodeId),
    /// Rank-0 scalar replicated to an arbitrary shape.
    BroadcastScalar(NodeId, Shape),
    /// [n] -> [m,n]: m copies of the row.
    RepeatRows(NodeId, usize),
    /// [m] -> [m,n]: n copies of the column.
    RepeatCols(NodeId, usize),
    /// Same data, new shape (target shape is the node's own value shape).
    Reshape(NodeId),
    /// Concatenate along the last axis.
    Concat(NodeId, NodeId),
    /// (start, len) window along the last axis.
    SliceCols(NodeId, usize, usize),
    /// Zero padding (before, after) along the last axis.
    PadCols(NodeId, usize, usize),
}

/// One recorded operation with its cached output.
#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// ── kernels ──────────────────────────────────────────────────────────────
// These run both inside graph ops and in the plain (graph-free) network
// forward used for environment rollouts, so the two paths agree bitwise.

/// C += A B. A: [m,k], B: [k,n], C: [m,n]. The inner loop runs along
/// contiguous rows of B and C and vectorizes without reassociation; k is
/// tiled so the active block of B stays cache-hot across the rows of A.
/// Each C element still accumulates in ascending-k order, so the result is
/// bit-identical to the untiled loop.
pub(crate) fn kernel_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    const K_BLOCK: usize = 32;
    let mut kb = 0;
    while kb < k {
        let ke = (kb + K_BLOCK).min(k);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut out[i * n..(i + 1) * n];
            for kk in kb..ke {
                let aik = arow[kk];
                let brow = &b[kk * n..(kk + 1) * n];
                for (c, &bkj) in crow.iter_mut().zip(brow) {
                    *c += aik * bkj;
                }
            }
        }
        kb = ke;
    }
}

/// C += A Bᵀ. A: [m,k], B: [n,k], C: [m,n]. Row-times-row dot products with
/// eight fixed accumulators; each output element's summation order is
/// pinned by this source, so results are identical on every platform.
/// Rows of A are processed in blocks so every row of B stays cache-hot
/// across a block instead of being re-read per output row.
pub(crate) fn kernel_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    const LANES: usize = 8;
    const ROW_BLOCK: usize = 8;
    let mut ib = 0;
    while ib < m {
        let ie = (ib + ROW_BLOCK).min(m);
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            for i in ib..ie {
                let arow = &a[i * k..(i + 1) * k];
                let mut acc = [0.0f64; LANES];
                let chunks = k / LANES;
                for ch in 0..chunks {
                    let base = ch * LANES;
                    for l in 0..LANES {
                        acc[l] += arow[base + l] * brow[base + l];
                    }
                }
                let mut s = ((acc[0] + acc[4]) + (acc[2] + acc[6]))
                    + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
                for idx in chunks * LANES..k {
                    s += arow[idx] * brow[idx];
                }
                out[i * n + j] += s;
            }
        }
        ib = ie;
    }
}

/// C += Aᵀ B. A: [k,m], B: [k,n], C: [m,n]. Every inner access is
/// contiguous, and k is tiled so the active block of B and each C row stay
/// cache-hot. Each C element still accumulates in ascending-k order, so the
/// result is bit-identical to the untiled loop.
pub(crate) fn kernel_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    const K_BLOCK: usize = 32;
    let mut kb = 0;
    while kb < k {
        let ke = (kb + K_BLOCK).min(k);
        for i in 0..m {
            let crow = &mut out[i * n..(i + 1) * n];
            for kk in kb..ke {
                let aki = a[kk * m + i];
                let brow = &b[kk * n..(kk + 1) * n];
                for (c, &bkj) in crow.iter_mut().zip(brow) {
                    *c += aki * bkj;
                }
            }
        }
        kb = ke;
    }
}

fn mismatch(op: &'static str, details: String) -> DiffError {
    DiffError::ShapeMismatch { op, details }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape_of(&self, id: NodeId) -> Shape {
        self.nodes[id].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, id: NodeId) -> f64 {
        self.nodes[id].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    // ── leaves ───────────────────────────────────────────────────────────

    /// Trainable leaf: `grad` targets must be created through here.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-trainable leaf (data, targets, detached quantities).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Overwrite a leaf's value in place (used by optimizers between steps).
    /// Panics if the node is not a leaf or the shape changes.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) {
        assert!(matches!(self.nodes[id].op, Op::Leaf), "set_leaf on non-leaf node {id}");
        assert_eq!(self.nodes[id].value.shape(), value.shape(), "set_leaf changed shape");
        self.nodes[id].value = value;
    }

    // ── elementwise ops ──────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(mismatch(name, format!("{sa} vs {sb}")));
        }
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, Tensor::new(sa, data), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.shape_of(a);
        let rg = self.rg(a);
        self.push(op, Tensor::new(shape, data), rg)
    }

    /// x · c for a constant c (the `scalar-mul` primitive).
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// x + c elementwise.
    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::Offset(a, c))
    }

    /// Tensor times a rank-0 node; differentiable in both operands.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, DiffError> {
        let ss = self.shape_of(s);
        if ss.rank() != 0 {
            return Err(mismatch("scale_by", format!("scale must be rank-0, got {ss}")));
        }
        let sv = self.item(s);
        let data = self.nodes[a].value.data().iter().map(|&x| x * sv).collect();
        let shape = self.shape_of(a);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Op::ScaleBy(a, s), Tensor::new(shape, data), rg))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, crate::fmath::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, crate::fmath::ln, Op::Log(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, crate::fmath::tanh, Op::Tanh(a))
    }

    /// min(x, cap) elementwise.
    pub fn clip_max(&mut self, a: NodeId, cap: f64) -> NodeId {
        self.unary(a, |x| if x < cap { x } else { cap }, Op::ClipMax(a, cap))
    }

    // ── matmul family ────────────────────────────────────────────────────

    fn mat_dims(
        &self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(Shape, Shape), DiffError> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.rank() != 2 || sb.rank() != 2 {
            return Err(mismatch(name, format!("needs rank-2 operands, got {sa} and {sb}")));
        }
        Ok((sa, sb))
    }

    /// C = A B.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = self.mat_dims("matmul", a, b)?;
        let (m, k) = (sa.dims()[0], sa.dims()[1]);
        let (kb, n) = (sb.dims()[0], sb.dims()[1]);
        if k != kb {
            return Err(mismatch("matmul", format!("{sa} x {sb}")));
        }
        let mut out = vec![0.0; m * n];
        kernel_nn(self.nodes[a].value.data(), self.nodes[b].value.data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out), rg))
    }

    /// C = A Bᵀ.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = self.mat_dims("matmul_nt", a, b)?;
        let (m, k) = (sa.dims()[0], sa.dims()[1]);
        let (n, kb) = (sb.dims()[0], sb.dims()[1]);
        if k != kb {
            return Err(mismatch("matmul_nt", format!("{sa} x {sb}ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        kernel_nt(self.nodes[a].value.data(), self.nodes[b].value.data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulNt(a, b), Tensor::matrix(m, n, out), rg))
    }

    /// C = Aᵀ B.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = self.mat_dims("matmul_tn", a, b)?;
        let (k, m) = (sa.dims()[0], sa.dims()[1]);
        let (kb, n) = (sb.dims()[0], sb.dims()[1]);
        if k != kb {
            return Err(mismatch("matmul_tn", format!("{sa}ᵀ x {sb}")));
        }
        let mut out = vec![0.0; m * n];
        kernel_tn(self.nodes[a].value.data(), self.nodes[b].value.data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulTn(a, b), Tensor::matrix(m, n, out), rg))
    }

    // ── reductions and broadcasts ────────────────────────────────────────

    /// Sum of all elements, yielding a rank-0 scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Arithmetic mean of all elements (sum then scale).
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// [m,n] -> [n]: sums down each column.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let sa = self.shape_of(a);
        if sa.rank() != 2 {
            return Err(mismatch("sum_rows", format!("needs rank-2, got {sa}")));
        }
        let (m, n) = (sa.dims()[0], sa.dims()[1]);
        let data = self.nodes[a].value.data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&data[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SumRows(a), Tensor::vector(out), rg))
    }

    /// [m,n] -> [m]: sums across each row.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let sa = self.shape_of(a);
        if sa.rank() != 2 {
            return Err(mismatch("sum_cols", format!("needs rank-2, got {sa}")));
        }
        let (m, n) = (sa.dims()[0], sa.dims()[1]);
        let data = self.nodes[a].value.data();
        let out: Vec<f64> = (0..m).map(|i| data[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::SumCols(a), Tensor::vector(out), rg))
    }

    /// Rank-0 scalar replicated to `shape`.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: Shape) -> Result<NodeId, DiffError> {
        let sa = self.shape_of(a);
        if sa.rank() != 0 {
            return Err(mismatch("broadcast_scalar", format!("needs rank-0, got {sa}")));
        }
        let v = self.item(a);
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastScalar(a, shape), Tensor::new(shape, vec![v; shape.numel()]), rg))
    }

    /// [n] -> [m,n]: the row repeated m times (bias broadcast over a batch).
    pub fn repeat_rows(&mut self, a: NodeId, m: usize) -> Result<NodeId, DiffError> {
        let sa = self.shape_of(a);
        if sa.rank() != 1 {
            return Err(mismatch("repeat_rows", format!("needs rank-1, got {sa}")));
        }
        let n = sa.dims()[0];
        let row = self.nodes[a].value.data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(row);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::RepeatRows(a, m), Tensor::matrix(m, n, out), rg))
    }

    /// [m] -> [m,n]: each element repeated across a row.
    pub fn repeat_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId, DiffError> {
        let sa = self.shape_of(a);
        if sa.rank() != 1 {
            return Err(mismatch("repeat_cols", format!("needs rank-1, got {sa}")));
        }
        let m = sa.dims()[0];
        let col = self.nodes[a].value.data();
        let mut out = Vec::with_capacity(m * n);
        for &v in col {
            out.extend(core::iter::repeat(v).take(n));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::RepeatCols(a, n), Tensor::matrix(m, n, out), rg))
    }

    // ── structural ops ───────────────────────────────────────────────────

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> Result<NodeId, DiffError> {
        let sa = self.shape_of(a);
        if sa.numel() != shape.numel() {
            return Err(mismatch("reshape", format!("{sa} -> {shape}")));
        }
        let t = Tensor::new(shape, self.nodes[a].value.data().to_vec());
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    /// Concatenate along the last axis: [p]+[q] -> [p+q] or
    /// [m,p]+[m,q] -> [m,p+q].
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.rank() != sb.rank() || sa.rank() == 0 || sa.rows() != sb.rows() {
            return Err(mismatch("concat", format!("{sa} vs {sb}")));
        }
        let rows = sa.rows();
        let (wa, wb) = (sa.last_dim(), sb.last_dim());
        let (da, db) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&db[r * wb..(r + 1) * wb]);
        }
        let shape = if sa.rank() == 1 {
            Shape::vector(wa + wb)
        } else {
            Shape::matrix(rows, wa + wb)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Concat(a, b), Tensor::new(shape, out), rg))
    }

    /// Window of `len` entries starting at `start` along the last axis.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let sa = self.shape_of(a);
        let w = sa.last_dim();
        if sa.rank() == 0 || start + len > w {
            return Err(mismatch("slice_cols", format!("[{start}, {}) of {sa}", start + len)));
        }
        let rows = sa.rows();
        let data = self.nodes[a].value.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&data[r * w + start..r * w + start + len]);
        }
        let shape =
            if sa.rank() == 1 { Shape::vector(len) } else { Shape::matrix(rows, len) };
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start, len), Tensor::new(shape, out), rg))
    }

    /// Zero padding before/after along the last axis (adjoint of slicing).
    pub fn pad_cols(&mut self, a: NodeId, before: usize, after: usize) -> Result<NodeId, DiffError> {
        let sa = self.shape_of(a);
        if sa.rank() == 0 {
            return Err(mismatch("pad_cols", format!("needs rank >= 1, got {sa}")));
        }
        let rows = sa.rows();
        let w = sa.last_dim();
        let nw = before + w + after;
        let data = self.nodes[a].value.data();
        let mut out = vec![0.0; rows * nw];
        for r in 0..rows {
            out[r * nw + before..r * nw + before + w]
                .copy_from_slice(&data[r * w..(r + 1) * w]);
        }
        let shape = if sa.rank() == 1 { Shape::vector(nw) } else { Shape::matrix(rows, nw) };
        let rg = self.rg(a);
        Ok(self.push(Op::PadCols(a, before, after), Tensor::new(shape, out), rg))
    }

    // ── differentiation ──────────────────────────────────────────────────

    /// Accumulate contribution `c` into the adjoint slot of `p`.
    fn acc(
        &mut self,
        adj: &mut [Option<NodeId>],
        p: NodeId,
        c: NodeId,
    ) -> Result<(), DiffError> {
        adj[p] = Some(match adj[p] {
            None => c,
            Some(prev) => self.add(prev, c)?,
        });
        Ok(())
    }

    /// 0/1 mask constant from a predicate over a node's current values.
    fn mask_of(&mut self, a: NodeId, pred: impl Fn(f64) -> bool) -> NodeId {
        let data = self.nodes[a].value.data().iter().map(|&x| if pred(x) { 1.0 } else { 0.0 });
        let t = Tensor::new(self.shape_of(a), data.collect());
        self.constant(t)
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to leaf nodes.
    ///
    /// With `create_graph` set, the returned ids are live graph nodes and can
    /// be differentiated again (exact higher-order derivatives). Otherwise
    /// they are detached constant leaves holding the same values.
    ///
    /// A target that the loss does not depend on gets a zero gradient; that
    /// is a documented outcome, not an error.
    pub fn grad(
        &mut self,
        loss: NodeId,
        wrt: &[NodeId],
        create_graph: bool,
    ) -> Result<Vec<NodeId>, DiffError> {
        for &p in wrt {
            if !matches!(self.nodes[p].op, Op::Leaf) {
                return Err(DiffError::NotALeaf { id: p });
            }
        }
        self.grad_nodes(loss, wrt, create_graph)
    }

    /// Like [`Graph::grad`], but accepts arbitrary (possibly interior) nodes
    /// as targets; the result for an interior node is its adjoint — the
    /// total derivative of the loss with respect to that node's output.
    /// Differentiating a second adaptation step with respect to the
    /// once-adapted parameters needs exactly this, since those are not
    /// leaves.
    pub fn grad_nodes(
        &mut self,
        loss: NodeId,
        wrt: &[NodeId],
        create_graph: bool,
    ) -> Result<Vec<NodeId>, DiffError> {
        let lshape = self.shape_of(loss);
        if lshape.numel() != 1 {
            return Err(DiffError::NonScalarLoss { shape: lshape });
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        let seed = self.constant(Tensor::new(lshape, vec![1.0]));
        adj[loss] = Some(seed);

        // Creation order is topological, so one reverse sweep visits every
        // node after all of its children. Nodes emitted while sweeping get
        // ids past the end of `adj` and are never revisited here.
        for i in (0..=loss).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op;
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.rg(a) {
                        self.acc(&mut adj, a, g)?;
                    }
                    if self.rg(b) {
                        self.acc(&mut adj, b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(a) {
                        self.acc(&mut adj, a, g)?;
                    }
                    if self.rg(b) {
                        let c = self.scale(g, -1.0);
                        self.acc(&mut adj, b, c)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let c = self.mul(g, b)?;
                        self.acc(&mut adj, a, c)?;
                    }
                    if self.rg(b) {
                        let c = self.mul(g, a)?;
                        self.acc(&mut adj, b, c)?;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(a) {
                        let c = self.matmul_nt(g, b)?;
                        self.acc(&mut adj, a, c)?;
                    }
                    if self.rg(b) {
                        let c = self.matmul_tn(a, g)?;
                        self.acc(&mut adj, b, c)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.rg(a) {
                        let c = self.matmul(g, b)?;
                        self.acc(&mut adj, a, c)?;
                    }
                    if self.rg(b) {
                        let c = self.matmul_tn(g, a)?;
                        self.acc(&mut adj, b, c)?;
                    }
                }
                Op::MatMulTn(a, b) => {
                    if self.rg(a) {
                        let c = self.matmul_nt(b, g)?;
                        self.acc(&mut adj, a, c)?;
                    }
                    if self.rg(b) {
                        let c = self.matmul(a, g)?;
                        self.acc(&mut adj, b, c)?;
                    }
                }
                Op::Scale(a, c0) => {
                    if self.rg(a) {
                        let c = self.scale(g, c0);
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::Offset(a, _) => {
                    if self.rg(a) {
                        self.acc(&mut adj, a, g)?;
                    }
                }
                Op::ScaleBy(a, s) => {
                    if self.rg(a) {
                        let c = self.scale_by(g, s)?;
                        self.acc(&mut adj, a, c)?;
                    }
                    if self.rg(s) {
                        let prod = self.mul(g, a)?;
                        let tot = self.sum(prod);
                        self.acc(&mut adj, s, tot)?;
                    }
                }
                Op::Exp(a) => {
                    if self.rg(a) {
                        let c = self.mul(g, i)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::Log(a) => {
                    if self.rg(a) {
                        let r = self.recip(a);
                        let c = self.mul(g, r)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::Recip(a) => {
                    if self.rg(a) {
                        // d(1/a)/da = -1/a² = -(output)².
                        let sq = self.square(i);
                        let gy = self.mul(g, sq)?;
                        let c = self.scale(gy, -1.0);
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::Square(a) => {
                    if self.rg(a) {
                        let ga = self.mul(g, a)?;
                        let c = self.scale(ga, 2.0);
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::Relu(a) => {
                    if self.rg(a) {
                        let m = self.mask_of(a, |x| x > 0.0);
                        let c = self.mul(g, m)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::Tanh(a) => {
                    if self.rg(a) {
                        // 1 - tanh² from the already-computed output.
                        let sq = self.square(i);
                        let neg = self.scale(sq, -1.0);
                        let one_minus = self.offset(neg, 1.0);
                        let c = self.mul(g, one_minus)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::ClipMax(a, cap) => {
                    if self.rg(a) {
                        // Zero subgradient at and beyond the cap.
                        let m = self.mask_of(a, |x| x < cap);
                        let c = self.mul(g, m)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::Sum(a) => {
                    if self.rg(a) {
                        let sa = self.shape_of(a);
                        let c = self.broadcast_scalar(g, sa)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::SumRows(a) => {
                    if self.rg(a) {
                        let m = self.shape_of(a).dims()[0];
                        let c = self.repeat_rows(g, m)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::SumCols(a) => {
                    if self.rg(a) {
                        let n = self.shape_of(a).dims()[1];
                        let c = self.repeat_cols(g, n)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::BroadcastScalar(a, _) => {
                    if self.rg(a) {
                        let c = self.sum(g);
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::RepeatRows(a, _) => {
                    if self.rg(a) {
                        let c = self.sum_rows(g)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::RepeatCols(a, _) => {
                    if self.rg(a) {
                        let c = self.sum_cols(g)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::Reshape(a) => {
                    if self.rg(a) {
                        let sa = self.shape_of(a);
                        let c = self.reshape(g, sa)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::Concat(a, b) => {
                    let wa = self.shape_of(a).last_dim();
                    let wb = self.shape_of(b).last_dim();
                    if self.rg(a) {
                        let c = self.slice_cols(g, 0, wa)?;
                        self.acc(&mut adj, a, c)?;
                    }
                    if self.rg(b) {
                        let c = self.slice_cols(g, wa, wb)?;
                        self.acc(&mut adj, b, c)?;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    if self.rg(a) {
                        let w = self.shape_of(a).last_dim();
                        let c = self.pad_cols(g, start, w - start - len)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
                Op::PadCols(a, before, _) => {
                    if self.rg(a) {
                        let w = self.shape_of(a).last_dim();
                        let c = self.slice_cols(g, before, w)?;
                        self.acc(&mut adj, a, c)?;
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &p in wrt {
            match adj[p] {
                Some(gid) if create_graph => out.push(gid),
                Some(gid) => {
                    let t = self.nodes[gid].value.clone();
                    out.push(self.constant(t));
                }
                None => {
                    let sh = self.shape_of(p);
                    out.push(self.constant(Tensor::zeros(sh)));
                }
            }
        }
        Ok(out)
    }
}
