//! Dense row-major matrices and a define-by-run reverse-mode graph.
//!
//! Every forward pass records its operations on a fresh [`Graph`]. Node ids
//! are handed out in insertion order, so insertion order is a topological
//! order and [`Graph::backward`] simply walks the node list in reverse.
//!
//! Only row-wise bias addition broadcasts; every other shape mismatch is a
//! [`TensorError::Shape`].

use crate::error::TensorError;

pub type Shape = [usize; 2];

/// A dense `rows × cols` matrix of finite `f64` values stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(TensorError::Layout {
                shape: [rows, cols],
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    /// Panics on a zero extent.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    /// Panics on a zero extent or a non-finite fill value.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor extents must be positive");
        assert!(value.is_finite());
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, TensorError> {
        let n = rows.len();
        let k = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * k);
        for r in rows {
            let r = r.as_ref();
            if r.len() != k {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    left: [1, k],
                    right: [1, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(n, k, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for parameter owners (optimizers). Callers must keep
    /// the values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let k = self.shape[1];
        &self.data[r * k..(r + 1) * k]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.shape[1])
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let [n, k] = self.shape;
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                out[j * n + i] = self.data[i * k + j];
            }
        }
        Tensor {
            shape: [k, n],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let [m, k] = self.shape;
        let [k2, n] = other.shape;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape,
                right: other.shape,
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: [m, n],
            data: out,
        })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor, TensorError> {
        let k = self.shape[1];
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            if i >= self.shape[0] {
                return Err(TensorError::Contract {
                    op: "select_rows",
                    reason: format!("row {i} out of range for {} rows", self.shape[0]),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(idx.len(), k, data)
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.row_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn checked(shape: Shape, data: Vec<f64>, op: &'static str) -> Result<Tensor, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(Tensor { shape, data })
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `aᵀ·g` for `a: m×k`, `g: m×n`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `g·bᵀ` for `g: m×n`, `b: k×n`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    GradScale(NodeId, f64),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Ln(NodeId),
    Clamp(NodeId, f64, f64),
    Abs(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    Outer(NodeId, NodeId),
    SelectRows(NodeId, Vec<usize>),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::GradScale(..) => "grad_scale",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Ln(..) => "ln",
            Op::Clamp(..) => "clamp",
            Op::Abs(..) => "abs",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Outer(..) => "outer_rows",
            Op::SelectRows(..) => "select_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    // true when some requires_grad leaf is an ancestor
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only operation record. Build one per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient buffer on backward.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            tracked: requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape,
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// A constant copy of `id`'s current value; gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    fn push(&mut self, op: Op, shape: Shape, data: Vec<f64>) -> Result<NodeId, TensorError> {
        let value = Tensor::checked(shape, data, op.name())?;
        let tracked = self.inputs(&op).iter().any(|i| self.nodes[i.0].tracked);
        self.nodes.push(Node {
            op,
            value,
            requires_grad: false,
            tracked,
            grad: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Outer(a, b)
            | Op::ConcatRows(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::GradScale(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Ln(a)
            | Op::Clamp(a, ..)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumCols(a)
            | Op::SelectRows(a, _)
            | Op::SliceRows(a, _) => vec![a],
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Shape, TensorError> {
        let (sa, sb) = (self.value(a).shape, self.value(b).shape);
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out.shape, out.data)
    }

    /// `a[n×k] + bias[1×k]`, the bias repeated on every row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(TensorError::Shape {
                op: "add_bias",
                left: ta.shape,
                right: tb.shape,
            });
        }
        let data = ta
            .row_iter()
            .flat_map(|r| r.iter().zip(&tb.data).map(|(x, b)| x + b))
            .collect();
        self.push(Op::AddBias(a, bias), ta.shape, data)
    }

    fn zip_with(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, TensorError> {
        let shape = self.same_shape(op.name(), a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, shape, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    fn map_unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let shape = t.shape;
        let data = t.data.iter().map(|&v| f(v)).collect();
        self.push(op, shape, data)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, TensorError> {
        self.map_unary(Op::Scale(a, s), a, |v| v * s)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        self.map_unary(Op::AddScalar(a), a, |v| v + c)
    }

    /// Identity forward; multiplies the incoming gradient by `s` on the way
    /// back (`s = -1` is a gradient reversal layer).
    pub fn grad_scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, TensorError> {
        self.map_unary(Op::GradScale(a, s), a, |v| v)
    }

    /// `max(x, slope·x)`. The derivative at exactly zero is taken as `slope`.
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, TensorError> {
        if !(slope > 0.0 && slope <= 1.0) {
            return Err(TensorError::Contract {
                op: "leaky_relu",
                reason: format!("slope {slope} outside (0, 1]"),
            });
        }
        self.map_unary(Op::LeakyRelu(a, slope), a, |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map_unary(Op::Sigmoid(a), a, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).data.iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "ln" });
        }
        self.map_unary(Op::Ln(a), a, f64::ln)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, TensorError> {
        self.map_unary(Op::Clamp(a, lo, hi), a, |v| v.clamp(lo, hi))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map_unary(Op::Abs(a), a, f64::abs)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let shape = t.shape;
        let mut data = Vec::with_capacity(t.len());
        for r in t.row_iter() {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut sum = 0.0;
            for &v in r {
                let e = (v - mx).exp();
                sum += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), shape, data)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let shape = t.shape;
        let mut data = Vec::with_capacity(t.len());
        for r in t.row_iter() {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + r.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            data.extend(r.iter().map(|&v| v - lse));
        }
        self.push(Op::LogSoftmaxRows(a), shape, data)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(a).data.iter().sum();
        self.push(Op::SumAll(a), [1, 1], vec![s])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Op::MeanAll(a), [1, 1], vec![s])
    }

    /// Per-row sums as an `n×1` column.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let data = t.row_iter().map(|r| r.iter().sum()).collect();
        self.push(Op::SumCols(a), [t.rows(), 1], data)
    }

    /// Row-wise flattened outer product: row `i` of the result holds
    /// `z_i p_iᵀ` with entry `a·K + b = z[i][a]·p[i][b]`.
    pub fn outer_rows(&mut self, z: NodeId, p: NodeId) -> Result<NodeId, TensorError> {
        let (tz, tp) = (self.value(z), self.value(p));
        if tz.rows() != tp.rows() {
            return Err(TensorError::Shape {
                op: "outer_rows",
                left: tz.shape,
                right: tp.shape,
            });
        }
        let (n, m, k) = (tz.rows(), tz.cols(), tp.cols());
        let mut data = Vec::with_capacity(n * m * k);
        for (zr, pr) in tz.row_iter().zip(tp.row_iter()) {
            for &za in zr {
                data.extend(pr.iter().map(|&pb| za * pb));
            }
        }
        self.push(Op::Outer(z, p), [n, m * k], data)
    }

    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let out = self.value(a).select_rows(idx)?;
        self.push(Op::SelectRows(a, idx.to_vec()), out.shape, out.data)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(TensorError::Shape {
                op: "concat_rows",
                left: ta.shape,
                right: tb.shape,
            });
        }
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let shape = [ta.rows() + tb.rows(), ta.cols()];
        self.push(Op::ConcatRows(a, b), shape, data)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        if start >= end || end > t.rows() {
            return Err(TensorError::Contract {
                op: "slice_rows",
                reason: format!("range {start}..{end} invalid for {} rows", t.rows()),
            });
        }
        let k = t.cols();
        let data = t.data[start * k..end * k].to_vec();
        self.push(Op::SliceRows(a, start), [end - start, k], data)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`]. Returns the number of nodes visited.
    pub fn backward(&mut self, loss: NodeId) -> Result<usize, TensorError> {
        let shape = self.value(loss).shape;
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            visited += 1;
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    grads[idx] = Some(g);
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(visited)
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut send = |target: NodeId, contrib: Vec<f64>| {
            if !self.nodes[target.0].tracked {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |a: NodeId, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            let x = &self.nodes[a.0].value.data;
            g.iter()
                .zip(x)
                .zip(&out.data)
                .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
                .collect()
        };
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].tracked {
                    send(a, matmul_nt(g, &tb.data, m, k, n));
                }
                if self.nodes[b.0].tracked {
                    send(b, matmul_tn(&ta.data, g, m, k, n));
                }
            }
            Op::AddBias(a, b) => {
                send(a, g.to_vec());
                let k = out.cols();
                let mut gb = vec![0.0; k];
                for r in g.chunks_exact(k) {
                    gb.iter_mut().zip(r).for_each(|(s, v)| *s += v);
                }
                send(b, gb);
            }
            Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                send(a, g.iter().zip(xb).map(|(gi, y)| gi * y).collect());
                send(b, g.iter().zip(xa).map(|(gi, x)| gi * x).collect());
            }
            Op::Scale(a, s) => send(a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => send(a, g.to_vec()),
            Op::GradScale(a, s) => send(a, g.iter().map(|v| v * s).collect()),
            Op::LeakyRelu(a, slope) => {
                send(a, elementwise(a, &|gi, x, _| if x > 0.0 { gi } else { slope * gi }))
            }
            Op::Sigmoid(a) => send(a, elementwise(a, &|gi, _, y| gi * y * (1.0 - y))),
            Op::Ln(a) => send(a, elementwise(a, &|gi, x, _| gi / x)),
            Op::Clamp(a, lo, hi) => send(
                a,
                elementwise(a, &|gi, x, _| if x < lo || x > hi { 0.0 } else { gi }),
            ),
            Op::Abs(a) => send(a, elementwise(a, &|gi, x, _| gi * sign(x))),
            Op::SoftmaxRows(a) => {
                let k = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(k).zip(out.data.chunks_exact(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                send(a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let k = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(k).zip(out.data.chunks_exact(k)) {
                    let total: f64 = gr.iter().sum();
                    ga.extend(gr.iter().zip(yr).map(|(gi, yi)| gi - yi.exp() * total));
                }
                send(a, ga);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.len();
                send(a, vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len();
                send(a, vec![g[0] / n as f64; n]);
            }
            Op::SumCols(a) => {
                let k = self.nodes[a.0].value.cols();
                send(a, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, k)).collect());
            }
            Op::Outer(z, p) => {
                let (tz, tp) = (&self.nodes[z.0].value, &self.nodes[p.0].value);
                let (m, k) = (tz.cols(), tp.cols());
                let mut gz = vec![0.0; tz.len()];
                let mut gp = vec![0.0; tp.len()];
                for i in 0..tz.rows() {
                    let gr = &g[i * m * k..(i + 1) * m * k];
                    let (zr, pr) = (tz.row(i), tp.row(i));
                    for a in 0..m {
                        let block = &gr[a * k..(a + 1) * k];
                        gz[i * m + a] = block.iter().zip(pr).map(|(x, y)| x * y).sum();
                        for (b, &gv) in block.iter().enumerate() {
                            gp[i * k + b] += gv * zr[a];
                        }
                    }
                }
                send(z, gz);
                send(p, gp);
            }
            Op::SelectRows(a, ref idx) => {
                let ta = &self.nodes[a.0].value;
                let k = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..k {
                        ga[src * k + c] += g[r * k + c];
                    }
                }
                send(a, ga);
            }
            Op::ConcatRows(a, b) => {
                let split = self.nodes[a.0].value.len();
                send(a, g[..split].to_vec());
                send(b, g[split..].to_vec());
            }
            Op::SliceRows(a, start) => {
                let ta = &self.nodes[a.0].value;
                let k = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                ga[start * k..start * k + g.len()].copy_from_slice(g);
                send(a, ga);
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (b.abs() + 1e-8)
    }

    /// Checks every input gradient of `build` (which maps leaf ids to a
    /// scalar) against central differences.
    fn check_op(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId, tol: f64) {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.backward(loss).unwrap();
        for (slot, input) in inputs.iter().enumerate() {
            let auto = g.grad(ids[slot]).unwrap();
            let f = |x: &Tensor| {
                let mut g = Graph::new();
                let ids: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.leaf(if j == slot { x.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut g, &ids);
                g.value(out).item()
            };
            let num = numeric_grad(input, &f, 1e-5);
            for (a, n) in auto.data().iter().zip(&num) {
                assert!(rel_err(*a, *n) < tol || (a - n).abs() < 1e-9, "input {slot}: autodiff {a} vs numeric {n}");
            }
        }
    }

    /// Weighted sum with fixed pseudo-random weights so every output entry
    /// influences the scalar differently.
    fn weighted_sum(g: &mut Graph, x: NodeId) -> NodeId {
        let t = g.value(x).clone();
        let w = Tensor::new(
            t.rows(),
            t.cols(),
            (0..t.len()).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect(),
        )
        .unwrap();
        let w = g.constant(w);
        let p = g.mul(x, w).unwrap();
        g.sum(p).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let i2 = Tensor::identity(2);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), Tensor::from_rows(&[[2.0], [4.0]]).unwrap());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        check_op(
            &[a, b],
            &|g, ids| {
                let m = g.matmul(ids[0], ids[1]).unwrap();
                weighted_sum(g, m)
            },
            1e-6,
        );
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap());
        let y = g.leaky_relu(x, 0.1).unwrap();
        assert_eq!(g.value(y).data(), &[-0.1, 0.0, 2.0]);
        let id = g.leaky_relu(x, 1.0).unwrap();
        assert_eq!(g.value(id), g.value(x));
        assert!(g.leaky_relu(x, 0.0).is_err());
    }

    #[test]
    fn leaky_relu_subgradient_at_zero_is_slope() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[[0.0]]).unwrap());
        let y = g.leaky_relu(x, 0.1).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.1);
    }

    #[test]
    fn leaky_relu_gradient_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = random(&mut rng, 3, 5);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        check_op(
            &[x],
            &|g, ids| {
                let y = g.leaky_relu(ids[0], 0.1).unwrap();
                weighted_sum(g, y)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for j in 0..3 {
            assert_abs_diff_eq!(v.get(0, j), 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(v.get(1, 0), 1.0, epsilon = 1e-15);
        assert!(v.get(1, 1) < 1e-300 + 1e-15);
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 3);
        check_op(
            &[x.clone()],
            &|g, ids| {
                let y = g.softmax_rows(ids[0]).unwrap();
                weighted_sum(g, y)
            },
            1e-5,
        );
        check_op(
            &[x],
            &|g, ids| {
                let y = g.log_softmax_rows(ids[0]).unwrap();
                weighted_sum(g, y)
            },
            1e-5,
        );
    }

    #[test]
    fn remaining_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 3, 2);
        let b = random(&mut rng, 3, 2);
        let bias = random(&mut rng, 1, 2);
        let p = random(&mut rng, 3, 3);
        check_op(
            &[a.clone(), bias],
            &|g, ids| {
                let y = g.add_bias(ids[0], ids[1]).unwrap();
                let y = g.sigmoid(y).unwrap();
                weighted_sum(g, y)
            },
            1e-6,
        );
        check_op(
            &[a.clone(), b.clone()],
            &|g, ids| {
                let s = g.sub(ids[0], ids[1]).unwrap();
                let m = g.mul(s, ids[1]).unwrap();
                let t = g.add(m, ids[0]).unwrap();
                let t = g.scale(t, 0.7).unwrap();
                let t = g.add_scalar(t, 3.0).unwrap();
                let c = g.concat_rows(t, ids[0]).unwrap();
                let sl = g.slice_rows(c, 1, 5).unwrap();
                let sel = g.select_rows(sl, &[0, 3, 3, 1]).unwrap();
                let rows = g.sum_cols(sel).unwrap();
                weighted_sum(g, rows)
            },
            1e-6,
        );
        check_op(
            &[a.clone(), p],
            &|g, ids| {
                let o = g.outer_rows(ids[0], ids[1]).unwrap();
                weighted_sum(g, o)
            },
            1e-6,
        );
        let pos = a.map(|v| v.abs() + 0.5);
        check_op(
            &[pos],
            &|g, ids| {
                let l = g.ln(ids[0]).unwrap();
                let ab = g.abs(l).unwrap();
                let m = g.mean(ab).unwrap();
                let s = g.sum(l).unwrap();
                let t = g.add(m, s).unwrap();
                g.clamp(t, -100.0, 100.0).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn grad_scale_reverses_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let r = g.grad_scale(x, -1.0).unwrap();
        assert_eq!(g.value(r), g.value(x));
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn sum_of_leaf_gives_ones_and_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[[1.0, -2.0], [3.0, 4.0]]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
        g.zero_grad();
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap();
        g.zero_grad();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2));
        let c = g.constant(Tensor::filled(2, 2, 1.0));
        let y = g.add(x, c).unwrap();
        let y = g.sigmoid(y).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap(), g.len());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(1, 2, 1.0));
        let x = g.leaf(Tensor::filled(1, 2, 2.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn non_finite_results_are_rejected() {
        assert!(Tensor::new(1, 1, vec![f64::NAN]).is_err());
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(1, 1, 1e308));
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
        let z = g.constant(Tensor::zeros(1, 1));
        assert!(matches!(g.ln(z), Err(TensorError::Domain { .. })));
    }

    proptest! {
        #[test]
        fn softmax_rows_lie_on_simplex(v in proptest::collection::vec(-700.0f64..700.0, 12)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(4, 3, v).unwrap());
            let y = g.softmax_rows(x).unwrap();
            for r in g.value(y).row_iter() {
                prop_assert!(r.iter().all(|&p| p >= 0.0));
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn elementwise_ops_match_finite_differences(v in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let x = Tensor::new(2, 3, v).unwrap();
            let f = |t: &Tensor| {
                let mut g = Graph::new();
                let x = g.leaf(t.clone());
                let y = g.sigmoid(x).unwrap();
                let y = g.softmax_rows(y).unwrap();
                let y = g.mul(y, x).unwrap();
                let s = g.sum(y).unwrap();
                (g, x, s)
            };
            let (mut g, id, s) = f(&x);
            g.backward(s).unwrap();
            let auto = g.grad(id).unwrap();
            let num = numeric_grad(&x, &|t| { let (g, _, s) = f(t); g.value(s).item() }, 1e-5);
            for (a, n) in auto.data().iter().zip(&num) {
                prop_assert!((a - n).abs() / (n.abs() + 1e-8) < 1e-4 || (a - n).abs() < 1e-9);
            }
        }
    }
}
