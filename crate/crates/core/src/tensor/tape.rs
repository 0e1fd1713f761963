//! Reverse-mode differentiation over [`Array`] values.
//!
//! Every op appends a node to the [`Tape`]; since inputs always exist before
//! the op that consumes them, the node vector is already in topological order
//! and [`Tape::backward`] is a single reverse sweep.

use super::array::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Array};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, producing a `1 x cols` row.
    Rows,
    /// Reduce over columns, producing a `rows x 1` column.
    Cols,
    All,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: Axis },
    SliceCols { x: Var, start: usize },
    LeakyRelu(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var, Axis),
    Mean(Var, Axis),
    Gather { x: Var, idx: Vec<usize> },
    ScatterAdd { x: Var, idx: Vec<usize> },
    SegmentSoftmax { x: Var, seg: Vec<usize> },
    HeadSum { x: Var, heads: usize },
    MulHeads { a: Var, v: Var },
    GraphNorm { x: Var, gamma: Var, beta: Var, alpha: Var, eps: f64 },
    SmoothL1 { x: Var, delta: f64 },
    Pick { x: Var, idx: Vec<usize> },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `v`; `None` only for non-leaf nodes the loss does not reach.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub mod scalar {
    //! Scalar versions of the activations, shared with non-tape code.
    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
    pub fn softplus(x: f64) -> f64 {
        super::softplus(x)
    }
    /// Inverse of softplus for `y > 0`.
    pub fn softplus_inverse(y: f64) -> f64 {
        if y > 30.0 {
            y
        } else {
            y.exp_m1().ln()
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{n}x{k} * {k2}x{m}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Array::matrix(n, m, out), Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.needs(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// Same data, new `rows x cols` shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x);
        if rows * cols != v.len() {
            return Err(Error::shape("reshape", format!("{:?} into {rows}x{cols}", v.shape())));
        }
        let out = Array::matrix(rows, cols, v.data().to_vec());
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) == (rb, cb) {
            Ok(Bcast::Same)
        } else if rb == 1 && cb == ca {
            Ok(Bcast::Row)
        } else if cb == 1 && rb == ra {
            Ok(Bcast::Col)
        } else {
            Err(Error::shape(op, format!("{ra}x{ca} with {rb}x{cb}")))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let mode = self.bcast(name, a, b)?;
        let (r, c) = self.dims(a);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let bj = match mode {
                    Bcast::Same => bv[i * c + j],
                    Bcast::Row => bv[j],
                    Bcast::Col => bv[i],
                };
                out.push(f(av[i * c + j], bj));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Array::matrix(r, c, out), make(a, b, mode), ng))
    }

    /// `a + b`; `b` may be a `1 x cols` row or `rows x 1` column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    /// Multiplies by a precomputed mask (already scaled by `1 / keep_prob`).
    pub fn dropout(&mut self, x: Var, mask: &Array) -> Result<Var> {
        let m = self.constant(mask.clone());
        self.mul(x, m)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let (r0, c0) = self.dims(first);
        let out = match axis {
            Axis::Cols => {
                if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).0 != r0) {
                    return Err(Error::shape(
                        "concat",
                        format!("row count {} vs {r0}", self.dims(bad).0),
                    ));
                }
                let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
                let mut data = Vec::with_capacity(r0 * total);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Array::matrix(r0, total, data)
            }
            Axis::Rows => {
                if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).1 != c0) {
                    return Err(Error::shape(
                        "concat",
                        format!("column count {} vs {c0}", self.dims(bad).1),
                    ));
                }
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                let rows = data.len() / c0;
                Array::matrix(rows, c0, data)
            }
            Axis::All => return Err(Error::shape("concat", "axis must be rows or cols")),
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xv.row_slice(i)[start..end]);
        }
        let ng = self.needs(x);
        Ok(self.push(Array::matrix(r, end - start, data), Op::SliceCols { x, start }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(out, op, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| leaky(v, slope), Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn smooth_l1(&mut self, x: Var, delta: f64) -> Var {
        let f = move |v: f64| {
            if v.abs() < delta {
                v * v / (2.0 * delta)
            } else {
                v.abs() - delta / 2.0
            }
        };
        self.unary(x, f, Op::SmoothL1 { x, delta })
    }

    /// Row-wise softmax of `x + mask`. The mask is a constant; a learnable
    /// additive bias should be added with [`Tape::add`] first.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Array>) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).clone();
        if let Some(m) = mask {
            if m.dims() != (r, c) {
                return Err(Error::shape(
                    "softmax",
                    format!("mask {:?} vs logits {r}x{c}", m.dims()),
                ));
            }
            out.add_assign(m);
        }
        for i in 0..r {
            softmax_in_place(&mut out.data_mut()[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    fn reduce(&self, x: Var, axis: Axis) -> Array {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                        *o += v;
                    }
                }
                Array::matrix(1, c, out)
            }
            Axis::Cols => Array::matrix(r, 1, (0..r).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect()),
            Axis::All => Array::scalar(xv.iter().sum()),
        }
    }

    pub fn sum(&mut self, x: Var, axis: Axis) -> Var {
        let out = self.reduce(x, axis);
        let ng = self.needs(x);
        self.push(out, Op::Sum(x, axis), ng)
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Var {
        let mut out = self.reduce(x, axis);
        let count = reduce_count(self.dims(x), axis);
        out.scale_in_place(1.0 / count as f64);
        let ng = self.needs(x);
        self.push(out, Op::Mean(x, axis), ng)
    }

    /// Output row `e` is input row `idx[e]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather", format!("row {bad} of {r}")));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather", "empty index"));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row_slice(i));
        }
        let ng = self.needs(x);
        Ok(self.push(
            Array::matrix(idx.len(), c, data),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Output has `rows` rows; input row `e` is added into output row `idx[e]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.len() != r {
            return Err(Error::shape("scatter_add", format!("{} indices for {r} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("scatter_add", format!("target row {bad} of {rows}")));
        }
        let mut out = Array::zeros(rows, c);
        let xv = self.value(x);
        for (e, &t) in idx.iter().enumerate() {
            let src = xv.row_slice(e);
            for (o, v) in out.data_mut()[t * c..(t + 1) * c].iter_mut().zip(src) {
                *o += v;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::ScatterAdd {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Softmax down each column, independently within each group of rows
    /// sharing a segment id.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if seg.len() != r {
            return Err(Error::shape("segment_softmax", format!("{} ids for {r} rows", seg.len())));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= segments) {
            return Err(Error::shape("segment_softmax", format!("segment {bad} of {segments}")));
        }
        let xv = self.value(x).data();
        let mut max = vec![f64::NEG_INFINITY; segments * c];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let m = &mut max[s * c + j];
                *m = m.max(xv[e * c + j]);
            }
        }
        let mut out = vec![0.0; r * c];
        let mut total = vec![0.0; segments * c];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let v = (xv[e * c + j] - max[s * c + j]).exp();
                out[e * c + j] = v;
                total[s * c + j] += v;
            }
        }
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..c {
                out[e * c + j] /= total[s * c + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Array::matrix(r, c, out),
            Op::SegmentSoftmax {
                x,
                seg: seg.to_vec(),
            },
            ng,
        ))
    }

    /// Sums each of `heads` contiguous column blocks: `E x d -> E x heads`.
    pub fn head_sum(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape("head_sum", format!("{c} columns into {heads} heads")));
        }
        let dh = c / heads;
        let xv = self.value(x).data();
        let out = (0..r * heads)
            .map(|k| {
                let (e, h) = (k / heads, k % heads);
                xv[e * c + h * dh..e * c + (h + 1) * dh].iter().sum()
            })
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Array::matrix(r, heads, out), Op::HeadSum { x, heads }, ng))
    }

    /// Scales each column block `h` of `v (E x d)` by `a[:, h]` where `a` is `E x heads`.
    pub fn mul_heads(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ra, heads) = self.dims(a);
        let (rv, c) = self.dims(v);
        if ra != rv || heads == 0 || c % heads != 0 {
            return Err(Error::shape("mul_heads", format!("{ra}x{heads} with {rv}x{c}")));
        }
        let dh = c / heads;
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let out = (0..rv * c)
            .map(|k| {
                let (e, j) = (k / c, k % c);
                av[e * heads + j / dh] * vv[k]
            })
            .collect();
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(Array::matrix(rv, c, out), Op::MulHeads { a, v }, ng))
    }

    /// Per-feature normalization over the rows (nodes) of one graph:
    /// `gamma * (x - alpha * mean) / sqrt(var + eps) + beta`, where `var` is the
    /// mean square of the shifted values. `gamma`, `beta`, `alpha` are `1 x d`.
    pub fn graph_norm(&mut self, x: Var, gamma: Var, beta: Var, alpha: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims(x);
        for (name, p) in [("gamma", gamma), ("beta", beta), ("alpha", alpha)] {
            if self.dims(p) != (1, d) {
                return Err(Error::shape(
                    "graph_norm",
                    format!("{name} is {:?}, expected 1x{d}", self.dims(p)),
                ));
            }
        }
        let xv = self.value(x).data();
        let (g, b, a) = (
            self.value(gamma).data(),
            self.value(beta).data(),
            self.value(alpha).data(),
        );
        let mut out = vec![0.0; n * d];
        for j in 0..d {
            let mu = (0..n).map(|i| xv[i * d + j]).sum::<f64>() / n as f64;
            let shift = a[j] * mu;
            let var = (0..n).map(|i| (xv[i * d + j] - shift).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..n {
                out[i * d + j] = g[j] * (xv[i * d + j] - shift) * inv + b[j];
            }
        }
        let ng = [x, gamma, beta, alpha].iter().any(|&v| self.needs(v));
        Ok(self.push(
            Array::matrix(n, d, out),
            Op::GraphNorm {
                x,
                gamma,
                beta,
                alpha,
                eps,
            },
            ng,
        ))
    }

    /// `out[i] = x[i, idx[i]]`, an `n x 1` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.len() != r {
            return Err(Error::shape("pick", format!("{} indices for {r} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape("pick", format!("column {bad} of {c}")));
        }
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(i, &j)| xv.at(i, j)).collect();
        let ng = self.needs(x);
        Ok(self.push(
            Array::matrix(r, 1, out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(1, 1, 1.0).reshaped_like(self.value(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Array::zeros_like(&node.value));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g.reshaped_like(&self.nodes[v.0].value)),
        }
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let y = &node.value;
        let elementwise = |x: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Array {
            let xv = self.value(x).data();
            let data = g
                .data()
                .iter()
                .zip(xv)
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
                .collect();
            let (r, c) = y.dims();
            Array::matrix(r, c, data)
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                if self.needs(*a) {
                    let da = matmul_nt_raw(g.data(), self.value(*b).data(), n, m, k);
                    self.accumulate(grads, *a, Array::matrix(n, k, da));
                }
                if self.needs(*b) {
                    let db = matmul_tn_raw(self.value(*a).data(), g.data(), n, k, m);
                    self.accumulate(grads, *b, Array::matrix(k, m, db));
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Reshape(x) => self.accumulate(grads, *x, g.clone().reshaped_like(self.value(*x))),
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let mut db = reduce_bcast(g, *mode);
                    db.scale_in_place(sign);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b, mode) => {
                let (r, c) = y.dims();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bat = |i: usize, j: usize| match mode {
                    Bcast::Same => bv[i * c + j],
                    Bcast::Row => bv[j],
                    Bcast::Col => bv[i],
                };
                if self.needs(*a) {
                    let da = Array::from_fn(r, c, |i, j| g.data()[i * c + j] * bat(i, j));
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let prod = Array::matrix(r, c, g.data().iter().zip(av).map(|(x, y)| x * y).collect());
                    self.accumulate(grads, *b, reduce_bcast(&prod, *mode));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Concat { parts, axis } => {
                let (r, c) = g.dims();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    let piece = match axis {
                        Axis::Cols => Array::from_fn(pr, pc, |i, j| g.data()[i * c + offset + j]),
                        _ => Array::matrix(pr, pc, g.data()[offset * c..(offset + pr) * c].to_vec()),
                    };
                    offset += if *axis == Axis::Cols { pc } else { pr };
                    self.accumulate(grads, p, piece);
                }
                debug_assert!(offset == if *axis == Axis::Cols { c } else { r });
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let w = g.cols();
                let mut dx = Array::zeros(r, c);
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let dx = elementwise(*x, &|gv, xv, _| if xv > 0.0 { gv } else { s * gv });
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = elementwise(*x, &|gv, xv, _| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = elementwise(*x, &|gv, _, yv| gv * yv * (1.0 - yv));
                self.accumulate(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let dx = elementwise(*x, &|gv, xv, _| gv * sigmoid(xv));
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = elementwise(*x, &|gv, _, yv| gv * yv);
                self.accumulate(grads, *x, dx);
            }
            Op::Log(x) => {
                let dx = elementwise(*x, &|gv, xv, _| gv / xv);
                self.accumulate(grads, *x, dx);
            }
            Op::SmoothL1 { x, delta } => {
                let d = *delta;
                let dx = elementwise(*x, &|gv, xv, _| {
                    if xv.abs() < d {
                        gv * xv / d
                    } else {
                        gv * xv.signum()
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let (r, c) = y.dims();
                let mut dx = Array::zeros(r, c);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let (r, c) = y.dims();
                let mut dx = Array::zeros(r, c);
                for i in 0..r {
                    let gr = g.row_slice(i);
                    let total: f64 = gr.iter().sum();
                    for (j, &gj) in gr.iter().enumerate() {
                        dx.data_mut()[i * c + j] = gj - y.at(i, j).exp() * total;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let (r, c) = self.dims(*x);
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / reduce_count((r, c), *axis) as f64
                } else {
                    1.0
                };
                let gd = g.data();
                let dx = Array::from_fn(r, c, |i, j| {
                    scale
                        * match axis {
                            Axis::Rows => gd[j],
                            Axis::Cols => gd[i],
                            Axis::All => gd[0],
                        }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { x, idx } => {
                let (r, c) = self.dims(*x);
                let mut dx = Array::zeros(r, c);
                for (e, &i) in idx.iter().enumerate() {
                    for (d, v) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(e)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScatterAdd { x, idx } => {
                let c = g.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &t in idx {
                    data.extend_from_slice(g.row_slice(t));
                }
                self.accumulate(grads, *x, Array::matrix(idx.len(), c, data));
            }
            Op::SegmentSoftmax { x, seg } => {
                let (r, c) = y.dims();
                let segments = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; segments * c];
                for (e, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        dot[s * c + j] += g.data()[e * c + j] * y.data()[e * c + j];
                    }
                }
                let dx = Array::from_fn(r, c, |e, j| {
                    y.data()[e * c + j] * (g.data()[e * c + j] - dot[seg[e] * c + j])
                });
                self.accumulate(grads, *x, dx);
            }
            Op::HeadSum { x, heads } => {
                let (r, c) = self.dims(*x);
                let dh = c / heads;
                let dx = Array::from_fn(r, c, |e, j| g.data()[e * heads + j / dh]);
                self.accumulate(grads, *x, dx);
            }
            Op::MulHeads { a, v } => {
                let (r, heads) = self.dims(*a);
                let c = self.dims(*v).1;
                let dh = c / heads;
                let av = self.value(*a).data();
                let vv = self.value(*v).data();
                if self.needs(*a) {
                    let mut da = Array::zeros(r, heads);
                    for e in 0..r {
                        for j in 0..c {
                            da.data_mut()[e * heads + j / dh] += g.data()[e * c + j] * vv[e * c + j];
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*v) {
                    let dv = Array::from_fn(r, c, |e, j| g.data()[e * c + j] * av[e * heads + j / dh]);
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::GraphNorm {
                x,
                gamma,
                beta,
                alpha,
                eps,
            } => {
                let (n, d) = self.dims(*x);
                let nf = n as f64;
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let alp = self.value(*alpha).data();
                let gd = g.data();
                let mut dx = Array::zeros(n, d);
                let mut dgamma = Array::zeros(1, d);
                let mut dbeta = Array::zeros(1, d);
                let mut dalpha = Array::zeros(1, d);
                let mut centered = vec![0.0; n];
                for j in 0..d {
                    let mu = (0..n).map(|i| xv[i * d + j]).sum::<f64>() / nf;
                    for (i, o) in centered.iter_mut().enumerate() {
                        *o = xv[i * d + j] - alp[j] * mu;
                    }
                    let var = centered.iter().map(|o| o * o).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut dn_dot_o = 0.0;
                    for i in 0..n {
                        let gi = gd[i * d + j];
                        dbeta.data_mut()[j] += gi;
                        dgamma.data_mut()[j] += gi * centered[i] * inv;
                        dn_dot_o += gi * gam[j] * centered[i];
                    }
                    let dvar = -0.5 * inv * inv * inv * dn_dot_o;
                    let mut do_sum = 0.0;
                    for i in 0..n {
                        let d_o = gd[i * d + j] * gam[j] * inv + dvar * 2.0 * centered[i] / nf;
                        dx.data_mut()[i * d + j] = d_o;
                        do_sum += d_o;
                    }
                    for i in 0..n {
                        dx.data_mut()[i * d + j] -= alp[j] * do_sum / nf;
                    }
                    dalpha.data_mut()[j] = -mu * do_sum;
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
                self.accumulate(grads, *alpha, dalpha);
            }
            Op::Pick { x, idx } => {
                let (r, c) = self.dims(*x);
                let mut dx = Array::zeros(r, c);
                for (i, &j) in idx.iter().enumerate() {
                    dx.data_mut()[i * c + j] = g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn reduce_count((r, c): (usize, usize), axis: Axis) -> usize {
    match axis {
        Axis::Rows => r,
        Axis::Cols => c,
        Axis::All => r * c,
    }
}

fn reduce_bcast(g: &Array, mode: Bcast) -> Array {
    let (r, c) = g.dims();
    match mode {
        Bcast::Same => g.clone(),
        Bcast::Row => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(g.row_slice(i)) {
                    *o += v;
                }
            }
            Array::matrix(1, c, out)
        }
        Bcast::Col => Array::matrix(r, 1, (0..r).map(|i| g.row_slice(i).iter().sum()).collect()),
    }
}

impl Array {
    fn reshaped_like(self, other: &Array) -> Array {
        if self.shape() == other.shape() {
            return self;
        }
        Array::new(other.shape().to_vec(), self.into_data()).expect("gradient has matching length")
    }
}
