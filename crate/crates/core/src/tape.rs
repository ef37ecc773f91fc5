//! Reverse-mode differentiation over a recorded tape of matrix-valued nodes.
//!
//! Nodes hold dense row-major tensors. Manifold points are recorded by their
//! spatial coordinates (one point per row); the time coordinate is implied.
//! Fused operations carry hand-derived vector-Jacobian products; every rule
//! is checked against central finite differences in the tests below.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fm;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Switch point between the exact and the Taylor form of the ZOH input gain.
pub const ZOH_TAYLOR_SWITCH: f64 = 1e-4;

/// Lower clamp on a squared distance when differentiating its square root.
pub const SQRT_GRAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Sigmoid,
    Softplus,
    LogSigmoid,
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MulScalar(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Unary(NodeId, Unary),
    Sum(NodeId),
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Gather { src: NodeId, idx: Vec<usize> },
    ConcatCols(NodeId, NodeId),
    Column(NodeId, usize),
    RepeatRow(NodeId),
    ShiftDown { m: NodeId, first: NodeId },
    SoftmaxRows(NodeId),
    ExpO(NodeId),
    LogO(NodeId),
    Mobius(NodeId, NodeId),
    Rotate { m: NodeId, angles: NodeId },
    SqDistRows(NodeId, NodeId),
    DistScores { e: NodeId, c: NodeId },
    EuclidScores { e: NodeId, c: NodeId },
    Recurrence { abar: NodeId, u: NodeId },
    ZohInput { dt: NodeId, a: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize },
    SoftmaxCe { logits: NodeId, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Build it forward, then call [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    pub fn get(&self, n: NodeId) -> Option<&[f64]> {
        self.grads[n.0].as_deref()
    }
}

fn shape_err(expected: usize, got: usize) -> Error {
    Error::Dimension { expected, got }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of scalars held by node values.
    pub fn stored_scalars(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        self.nodes[n.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    fn val(&self, n: NodeId) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a store entry; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(Some(n)) = self.param_nodes.get(id.0) {
            return *n;
        }
        let p = store.param(id);
        let n = self.push(p.value.clone(), Op::Param, p.trainable);
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        self.param_nodes[id.0] = Some(n);
        n
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        let (x, y) = (self.val(a), self.val(b));
        if x.shape() != y.shape() {
            return Err(shape_err(x.len(), y.len()));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (x, y) = (self.val(a), self.val(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let t = Tensor::from_vec(x.rows, x.cols, data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let x = self.val(a);
        let t = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * k).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let x = self.val(a);
        let t = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v + k).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::AddConst(a), rg)
    }

    /// `a * s` for a `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.val(s).len() != 1 {
            return Err(shape_err(1, self.val(s).len()));
        }
        let k = self.val(s).item();
        let x = self.val(a);
        let t = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * k).collect());
        let rg = self.rg(&[a, s]);
        Ok(self.push(t, Op::MulScalar(a, s), rg))
    }

    fn row_broadcast(&mut self, m: NodeId, v: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (x, r) = (self.val(m), self.val(v));
        if r.len() != x.cols {
            return Err(shape_err(x.cols, r.len()));
        }
        let mut t = x.clone();
        for i in 0..t.rows {
            t.row_mut(i).iter_mut().zip(&r.data).for_each(|(a, b)| *a = f(*a, *b));
        }
        let rg = self.rg(&[m, v]);
        Ok(self.push(t, op, rg))
    }

    /// Multiplies every row of `m` elementwise by the vector `v`.
    pub fn mul_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.row_broadcast(m, v, Op::MulRow(m, v), |a, b| a * b)
    }

    /// Adds the vector `v` to every row of `m`.
    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.row_broadcast(m, v, Op::AddRow(m, v), |a, b| a + b)
    }

    /// Scales row `i` of `m` by `c[i]`.
    pub fn mul_col(&mut self, m: NodeId, c: NodeId) -> Result<NodeId> {
        let (x, col) = (self.val(m), self.val(c));
        if col.len() != x.rows {
            return Err(shape_err(x.rows, col.len()));
        }
        let mut t = x.clone();
        for i in 0..t.rows {
            let k = col.data[i];
            t.row_mut(i).iter_mut().for_each(|a| *a *= k);
        }
        let rg = self.rg(&[m, c]);
        Ok(self.push(t, Op::MulCol(m, c), rg))
    }

    pub fn unary(&mut self, a: NodeId, kind: Unary) -> NodeId {
        let x = self.val(a);
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => fm::exp,
            Unary::Sigmoid => fm::sigmoid,
            Unary::Softplus => fm::softplus,
            Unary::LogSigmoid => fm::log_sigmoid,
            Unary::Relu => |v| v.max(0.0),
            Unary::Tanh => libm::tanh,
        };
        let t = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| f(*v)).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Unary(a, kind), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Exp)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Softplus)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::LogSigmoid)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Relu)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.val(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `x w^T + b` applied to every row of `x`; `w` is `out x in`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.val(x), self.val(w));
        if xv.cols != wv.cols {
            return Err(shape_err(wv.cols, xv.cols));
        }
        if let Some(b) = b {
            if self.val(b).len() != wv.rows {
                return Err(shape_err(wv.rows, self.val(b).len()));
            }
        }
        let mut t = Tensor::zeros(xv.rows, wv.rows);
        for n in 0..xv.rows {
            let xr = xv.row(n);
            for o in 0..wv.rows {
                t.data[n * wv.rows + o] = fm::dot(wv.row(o), xr);
            }
        }
        if let Some(b) = b {
            let bv = &self.val(b).data;
            for n in 0..t.rows {
                t.row_mut(n).iter_mut().zip(bv).for_each(|(a, c)| *a += c);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Affine { x, w, b }, rg))
    }

    /// Rows of `src` picked by `idx` (repeats allowed).
    pub fn gather(&mut self, src: NodeId, idx: &[usize]) -> Result<NodeId> {
        let s = self.val(src);
        let mut data = Vec::with_capacity(idx.len() * s.cols);
        for &i in idx {
            if i >= s.rows {
                return Err(Error::Lookup { kind: "row", index: i });
            }
            data.extend_from_slice(s.row(i));
        }
        let t = Tensor::from_vec(idx.len(), s.cols, data);
        let rg = self.rg(&[src]);
        Ok(self.push(t, Op::Gather { src, idx: idx.to_vec() }, rg))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.val(a), self.val(b));
        if x.rows != y.rows {
            return Err(shape_err(x.rows, y.rows));
        }
        let mut data = Vec::with_capacity(x.len() + y.len());
        for i in 0..x.rows {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(y.row(i));
        }
        let t = Tensor::from_vec(x.rows, x.cols + y.cols, data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::ConcatCols(a, b), rg))
    }

    /// Column `j` as a `rows x 1` node.
    pub fn column(&mut self, m: NodeId, j: usize) -> Result<NodeId> {
        let x = self.val(m);
        if j >= x.cols {
            return Err(shape_err(x.cols, j + 1));
        }
        let t = Tensor::from_vec(x.rows, 1, (0..x.rows).map(|i| x.get(i, j)).collect());
        let rg = self.rg(&[m]);
        Ok(self.push(t, Op::Column(m, j), rg))
    }

    /// Stacks `n` copies of the vector `v`.
    pub fn repeat_row(&mut self, v: NodeId, n: usize) -> NodeId {
        let x = self.val(v);
        let mut data = Vec::with_capacity(n * x.len());
        for _ in 0..n {
            data.extend_from_slice(&x.data);
        }
        let t = Tensor::from_vec(n, x.len(), data);
        let rg = self.rg(&[v]);
        self.push(t, Op::RepeatRow(v), rg)
    }

    /// `[first; m[0]; ...; m[rows-2]]`.
    pub fn shift_down(&mut self, m: NodeId, first: NodeId) -> Result<NodeId> {
        let (x, f) = (self.val(m), self.val(first));
        if f.len() != x.cols {
            return Err(shape_err(x.cols, f.len()));
        }
        let mut data = Vec::with_capacity(x.len());
        data.extend_from_slice(&f.data);
        if x.rows > 0 {
            data.extend_from_slice(&x.data[..(x.rows - 1) * x.cols]);
        }
        data.truncate(x.len());
        let t = Tensor::from_vec(x.rows, x.cols, data);
        let rg = self.rg(&[m, first]);
        Ok(self.push(t, Op::ShiftDown { m, first }, rg))
    }

    pub fn softmax_rows(&mut self, m: NodeId) -> NodeId {
        let mut t = self.val(m).clone();
        for i in 0..t.rows {
            softmax_in_place(t.row_mut(i));
        }
        let rg = self.rg(&[m]);
        self.push(t, Op::SoftmaxRows(m), rg)
    }

    /// Row-wise exponential map at the origin: tangent rows to spatial rows.
    pub fn exp_o(&mut self, m: NodeId) -> NodeId {
        let mut t = self.val(m).clone();
        for i in 0..t.rows {
            let row = t.row_mut(i);
            let (f, _) = fm::sinhc_pair(fm::sqrt(fm::norm_sq(row)));
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(&[m]);
        self.push(t, Op::ExpO(m), rg)
    }

    /// Row-wise logarithmic map at the origin: spatial rows to tangent rows.
    pub fn log_o(&mut self, m: NodeId) -> NodeId {
        let mut t = self.val(m).clone();
        for i in 0..t.rows {
            let row = t.row_mut(i);
            let (g, _) = fm::asinhc_pair(fm::sqrt(fm::norm_sq(row)));
            row.iter_mut().for_each(|v| *v *= g);
        }
        let rg = self.rg(&[m]);
        self.push(t, Op::LogO(m), rg)
    }

    /// Row-wise Möbius addition `a ⊕ b` in spatial coordinates:
    /// `(y_0 + <s,t>/(1+x_0)) s + t`.
    pub fn mobius(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (x, y) = (self.val(a), self.val(b));
        let mut t = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let (s, u) = (x.row(i), y.row(i));
            let x0 = fm::sqrt(1.0 + fm::norm_sq(s));
            let y0 = fm::sqrt(1.0 + fm::norm_sq(u));
            let k = y0 + fm::dot(s, u) / (1.0 + x0);
            for (o, (si, ui)) in t.row_mut(i).iter_mut().zip(s.iter().zip(u)) {
                *o = k * si + ui;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mobius(a, b), rg))
    }

    /// Block-diagonal rotation of every row by `angles` (`1 x floor(n/2)`).
    pub fn rotate(&mut self, m: NodeId, angles: NodeId) -> Result<NodeId> {
        let (x, th) = (self.val(m), self.val(angles));
        if th.len() != x.cols / 2 {
            return Err(shape_err(x.cols / 2, th.len()));
        }
        let mut t = x.clone();
        for i in 0..t.rows {
            let row = t.row_mut(i);
            for (k, &theta) in th.data.iter().enumerate() {
                let (s, c) = (fm::sin(theta), fm::cos(theta));
                let (p, q) = (row[2 * k], row[2 * k + 1]);
                row[2 * k] = c * p - s * q;
                row[2 * k + 1] = s * p + c * q;
            }
        }
        let rg = self.rg(&[m, angles]);
        Ok(self.push(t, Op::Rotate { m, angles }, rg))
    }

    /// Squared Lorentz distance between matching rows, as a `rows x 1` node.
    pub fn sq_dist_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (x, y) = (self.val(a), self.val(b));
        let data = (0..x.rows).map(|i| crate::manifold::sq_dist_spatial(x.row(i), y.row(i))).collect();
        let t = Tensor::from_vec(x.rows, 1, data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::SqDistRows(a, b), rg))
    }

    /// `-sqrt(d_L^2(e_n, c_k))` for every row pair, `N x K`.
    pub fn dist_scores(&mut self, e: NodeId, c: NodeId) -> Result<NodeId> {
        let (x, y) = (self.val(e), self.val(c));
        if x.cols != y.cols {
            return Err(shape_err(x.cols, y.cols));
        }
        let mut t = Tensor::zeros(x.rows, y.rows);
        for n in 0..x.rows {
            for k in 0..y.rows {
                let d2 = crate::manifold::sq_dist_spatial(x.row(n), y.row(k));
                t.data[n * y.rows + k] = -fm::sqrt(d2);
            }
        }
        let rg = self.rg(&[e, c]);
        Ok(self.push(t, Op::DistScores { e, c }, rg))
    }

    /// `-|e_n - c_k|` for every row pair, `N x K`.
    pub fn euclid_scores(&mut self, e: NodeId, c: NodeId) -> Result<NodeId> {
        let (x, y) = (self.val(e), self.val(c));
        if x.cols != y.cols {
            return Err(shape_err(x.cols, y.cols));
        }
        let mut t = Tensor::zeros(x.rows, y.rows);
        for n in 0..x.rows {
            for k in 0..y.rows {
                let d2: f64 = x.row(n).iter().zip(y.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                t.data[n * y.rows + k] = -fm::sqrt(d2);
            }
        }
        let rg = self.rg(&[e, c]);
        Ok(self.push(t, Op::EuclidScores { e, c }, rg))
    }

    /// Diagonal linear recurrence `h_t = abar_t * h_{t-1} + u_t`, `h_0 = 0`,
    /// returning the stacked states `h_1..h_L`.
    pub fn recurrence(&mut self, abar: NodeId, u: NodeId) -> Result<NodeId> {
        self.same_shape(abar, u)?;
        let (a, x) = (self.val(abar), self.val(u));
        let mut t = Tensor::zeros(a.rows, a.cols);
        let mut h = vec![0.0; a.cols];
        for i in 0..a.rows {
            for j in 0..a.cols {
                h[j] = a.get(i, j) * h[j] + x.get(i, j);
            }
            t.row_mut(i).copy_from_slice(&h);
        }
        let rg = self.rg(&[abar, u]);
        Ok(self.push(t, Op::Recurrence { abar, u }, rg))
    }

    /// Zero-order-hold input gain `(exp(dt a) - 1)/a` with the Taylor form
    /// `dt (1 + dt a/2 + (dt a)^2/6)` where `|dt a| < ZOH_TAYLOR_SWITCH`.
    pub fn zoh_input(&mut self, dt: NodeId, a: &[f64]) -> Result<NodeId> {
        let x = self.val(dt);
        if a.len() != x.cols {
            return Err(shape_err(x.cols, a.len()));
        }
        let mut t = x.clone();
        for i in 0..t.rows {
            for (v, &aj) in t.row_mut(i).iter_mut().zip(a) {
                *v = zoh_gain(*v, aj);
            }
        }
        let rg = self.rg(&[dt]);
        Ok(self.push(t, Op::ZohInput { dt, a: a.to_vec() }, rg))
    }

    /// Causal multi-head scaled dot-product attention over rows.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        self.same_shape(q, k)?;
        self.same_shape(q, v)?;
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        if heads == 0 || qv.cols % heads != 0 {
            return Err(Error::Config(alloc::format!("{} columns cannot be split into {heads} heads", qv.cols)));
        }
        let dh = qv.cols / heads;
        let scale = 1.0 / fm::sqrt(dh as f64);
        let mut t = Tensor::zeros(qv.rows, qv.cols);
        let mut w = vec![0.0; qv.rows];
        for row in 0..qv.rows {
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let qr = &qv.row(row)[r.clone()];
                for j in 0..=row {
                    w[j] = fm::dot(qr, &kv.row(j)[r.clone()]) * scale;
                }
                softmax_in_place(&mut w[..=row]);
                let out = &mut t.row_mut(row)[r.clone()];
                for j in 0..=row {
                    let vr = &vv.row(j)[r.clone()];
                    out.iter_mut().zip(vr).for_each(|(o, x)| *o += w[j] * x);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(t, Op::Attention { q, k, v, heads }, rg))
    }

    /// Summed softmax cross-entropy of each logits row against its label.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.val(logits);
        if labels.len() != z.rows {
            return Err(shape_err(z.rows, labels.len()));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= z.cols {
                return Err(Error::Lookup { kind: "label", index: y });
            }
            let row = z.row(i);
            total += log_sum_exp(row) - row[y];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(total), Op::SoftmaxCe { logits, labels: labels.to_vec() }, rg))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<NodeGrads> {
        if self.val(root).len() != 1 {
            return Err(Error::Dimension { expected: 1, got: self.val(root).len() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Param | Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(NodeGrads { grads })
    }

    /// Gradients of `root` collected per parameter.
    pub fn param_grads(&self, root: NodeId, n_params: usize) -> Result<Gradients> {
        let ng = self.backward(root)?;
        let mut out = Gradients::with_len(n_params);
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(n) = node {
                if let Some(g) = ng.get(*n) {
                    out.accumulate(ParamId(pid), g);
                }
            }
        }
        Ok(out)
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], n: NodeId) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[n.0].requires_grad {
            return None;
        }
        let len = self.nodes[n.0].value.len();
        Some(grads[n.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.val(*a).data, &self.val(*b).data);
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += k * y);
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.val(*s).item();
                let av = &self.val(*a).data;
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += k * y);
                }
                if let Some(gs) = self.buf(grads, *s) {
                    gs[0] += fm::dot(g, av);
                }
            }
            Op::MulRow(m, v) => {
                let (mv, vv) = (self.val(*m), self.val(*v));
                let cols = mv.cols;
                if let Some(gm) = self.buf(grads, *m) {
                    for (i, x) in gm.iter_mut().enumerate() {
                        *x += g[i] * vv.data[i % cols];
                    }
                }
                if let Some(gv) = self.buf(grads, *v) {
                    for (i, y) in g.iter().enumerate() {
                        gv[i % cols] += y * mv.data[i];
                    }
                }
            }
            Op::AddRow(m, v) => {
                let cols = self.val(*m).cols;
                if let Some(gm) = self.buf(grads, *m) {
                    add_into(gm, g);
                }
                if let Some(gv) = self.buf(grads, *v) {
                    for (i, y) in g.iter().enumerate() {
                        gv[i % cols] += y;
                    }
                }
            }
            Op::MulCol(m, c) => {
                let (mv, cv) = (self.val(*m), self.val(*c));
                let cols = mv.cols;
                if let Some(gm) = self.buf(grads, *m) {
                    for (i, x) in gm.iter_mut().enumerate() {
                        *x += g[i] * cv.data[i / cols];
                    }
                }
                if let Some(gc) = self.buf(grads, *c) {
                    for (i, y) in g.iter().enumerate() {
                        gc[i / cols] += y * mv.data[i];
                    }
                }
            }
            Op::Unary(a, kind) => {
                let x = &self.val(*a).data;
                let y = &out.data;
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Exp => y[i],
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Softplus => fm::sigmoid(x[i]),
                            Unary::LogSigmoid => fm::sigmoid(-x[i]),
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Tanh => 1.0 - y[i] * y[i],
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (n, out_dim, in_dim) = (xv.rows, wv.rows, wv.cols);
                if let Some(gx) = self.buf(grads, *x) {
                    for r in 0..n {
                        let gr = &g[r * out_dim..(r + 1) * out_dim];
                        let dst = &mut gx[r * in_dim..(r + 1) * in_dim];
                        for (o, &go) in gr.iter().enumerate() {
                            if go != 0.0 {
                                dst.iter_mut().zip(wv.row(o)).for_each(|(d, w)| *d += go * w);
                            }
                        }
                    }
                }
                if let Some(gw) = self.buf(grads, *w) {
                    for r in 0..n {
                        let xr = xv.row(r);
                        for o in 0..out_dim {
                            let go = g[r * out_dim + o];
                            if go != 0.0 {
                                let dst = &mut gw[o * in_dim..(o + 1) * in_dim];
                                dst.iter_mut().zip(xr).for_each(|(d, x)| *d += go * x);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.buf(grads, *b) {
                        for r in 0..n {
                            add_into(gb, &g[r * out_dim..(r + 1) * out_dim]);
                        }
                    }
                }
            }
            Op::Gather { src, idx } => {
                let cols = self.val(*src).cols;
                if let Some(gs) = self.buf(grads, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.val(*a).cols, self.val(*b).cols);
                let rows = self.val(*a).rows;
                if let Some(ga) = self.buf(grads, *a) {
                    for r in 0..rows {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for r in 0..rows {
                        add_into(&mut gb[r * cb..(r + 1) * cb], &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                }
            }
            Op::Column(m, j) => {
                let cols = self.val(*m).cols;
                if let Some(gm) = self.buf(grads, *m) {
                    for (r, y) in g.iter().enumerate() {
                        gm[r * cols + j] += y;
                    }
                }
            }
            Op::RepeatRow(v) => {
                if let Some(gv) = self.buf(grads, *v) {
                    let c = gv.len();
                    for chunk in g.chunks(c) {
                        add_into(gv, chunk);
                    }
                }
            }
            Op::ShiftDown { m, first } => {
                let cols = out.cols;
                if let Some(gf) = self.buf(grads, *first) {
                    add_into(gf, &g[..cols]);
                }
                if let Some(gm) = self.buf(grads, *m) {
                    let n = g.len() - cols;
                    add_into(&mut gm[..n], &g[cols..]);
                }
            }
            Op::SoftmaxRows(m) => {
                if let Some(gm) = self.buf(grads, *m) {
                    for r in 0..out.rows {
                        let y = out.row(r);
                        let gr = &g[r * out.cols..(r + 1) * out.cols];
                        let s = fm::dot(y, gr);
                        for c in 0..out.cols {
                            gm[r * out.cols + c] += y[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::ExpO(m) => {
                let mv = self.val(*m);
                if let Some(gm) = self.buf(grads, *m) {
                    for r in 0..mv.rows {
                        let v = mv.row(r);
                        let gr = &g[r * mv.cols..(r + 1) * mv.cols];
                        let (f, h) = fm::sinhc_pair(fm::sqrt(fm::norm_sq(v)));
                        let vg = fm::dot(v, gr);
                        let dst = &mut gm[r * mv.cols..(r + 1) * mv.cols];
                        for c in 0..mv.cols {
                            dst[c] += f * gr[c] + h * vg * v[c];
                        }
                    }
                }
            }
            Op::LogO(m) => {
                let mv = self.val(*m);
                if let Some(gm) = self.buf(grads, *m) {
                    for r in 0..mv.rows {
                        let s = mv.row(r);
                        let gr = &g[r * mv.cols..(r + 1) * mv.cols];
                        let (f, h) = fm::asinhc_pair(fm::sqrt(fm::norm_sq(s)));
                        let sg = fm::dot(s, gr);
                        let dst = &mut gm[r * mv.cols..(r + 1) * mv.cols];
                        for c in 0..mv.cols {
                            dst[c] += f * gr[c] + h * sg * s[c];
                        }
                    }
                }
            }
            Op::Mobius(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let cols = x.cols;
                let ra = self.nodes[a.0].requires_grad;
                let rb = self.nodes[b.0].requires_grad;
                let mut ga_tmp = vec![0.0; if ra { x.len() } else { 0 }];
                let mut gb_tmp = vec![0.0; if rb { y.len() } else { 0 }];
                for r in 0..x.rows {
                    let (s, t) = (x.row(r), y.row(r));
                    let gr = &g[r * cols..(r + 1) * cols];
                    let x0 = fm::sqrt(1.0 + fm::norm_sq(s));
                    let y0 = fm::sqrt(1.0 + fm::norm_sq(t));
                    let st = fm::dot(s, t);
                    let k = y0 + st / (1.0 + x0);
                    let gs = fm::dot(gr, s);
                    if ra {
                        let c1 = gs / (1.0 + x0);
                        let c2 = gs * st / ((1.0 + x0) * (1.0 + x0) * x0);
                        for c in 0..cols {
                            ga_tmp[r * cols + c] = k * gr[c] + c1 * t[c] - c2 * s[c];
                        }
                    }
                    if rb {
                        let c1 = gs / y0;
                        let c2 = gs / (1.0 + x0);
                        for c in 0..cols {
                            gb_tmp[r * cols + c] = gr[c] + c1 * t[c] + c2 * s[c];
                        }
                    }
                }
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, &ga_tmp);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    add_into(gb, &gb_tmp);
                }
            }
            Op::Rotate { m, angles } => {
                let (mv, th) = (self.val(*m), self.val(*angles));
                let cols = mv.cols;
                if let Some(gm) = self.buf(grads, *m) {
                    for r in 0..mv.rows {
                        let base = r * cols;
                        for c in 0..cols {
                            gm[base + c] += if c / 2 < th.len() { 0.0 } else { g[base + c] };
                        }
                        for (k, &theta) in th.data.iter().enumerate() {
                            let (s, c) = (fm::sin(theta), fm::cos(theta));
                            let (gi, gj) = (g[base + 2 * k], g[base + 2 * k + 1]);
                            gm[base + 2 * k] += c * gi + s * gj;
                            gm[base + 2 * k + 1] += -s * gi + c * gj;
                        }
                    }
                }
                if let Some(ga) = self.buf(grads, *angles) {
                    for r in 0..mv.rows {
                        let base = r * cols;
                        for k in 0..th.len() {
                            let (gi, gj) = (g[base + 2 * k], g[base + 2 * k + 1]);
                            let (oi, oj) = (out.data[base + 2 * k], out.data[base + 2 * k + 1]);
                            ga[k] += -gi * oj + gj * oi;
                        }
                    }
                }
            }
            Op::SqDistRows(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let cols = x.cols;
                let ra = self.nodes[a.0].requires_grad;
                let rb = self.nodes[b.0].requires_grad;
                let mut ga_tmp = vec![0.0; if ra { x.len() } else { 0 }];
                let mut gb_tmp = vec![0.0; if rb { y.len() } else { 0 }];
                for r in 0..x.rows {
                    let (s, t) = (x.row(r), y.row(r));
                    let x0 = fm::sqrt(1.0 + fm::norm_sq(s));
                    let y0 = fm::sqrt(1.0 + fm::norm_sq(t));
                    let gr = g[r];
                    for c in 0..cols {
                        if ra {
                            ga_tmp[r * cols + c] = gr * (2.0 * y0 / x0 * s[c] - 2.0 * t[c]);
                        }
                        if rb {
                            gb_tmp[r * cols + c] = gr * (2.0 * x0 / y0 * t[c] - 2.0 * s[c]);
                        }
                    }
                }
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, &ga_tmp);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    add_into(gb, &gb_tmp);
                }
            }
            Op::DistScores { e, c } => {
                let (x, y) = (self.val(*e), self.val(*c));
                let cols = x.cols;
                let re = self.nodes[e.0].requires_grad;
                let rc = self.nodes[c.0].requires_grad;
                let mut ge_tmp = vec![0.0; if re { x.len() } else { 0 }];
                let mut gc_tmp = vec![0.0; if rc { y.len() } else { 0 }];
                let y0s: Vec<f64> = (0..y.rows).map(|k| fm::sqrt(1.0 + fm::norm_sq(y.row(k)))).collect();
                for n in 0..x.rows {
                    let s = x.row(n);
                    let x0 = fm::sqrt(1.0 + fm::norm_sq(s));
                    for k in 0..y.rows {
                        let gk = g[n * y.rows + k];
                        if gk == 0.0 {
                            continue;
                        }
                        let d = -out.data[n * y.rows + k];
                        // d(-sqrt(q))/dq with the floor on q
                        let dq = -0.5 / fm::sqrt((d * d).max(SQRT_GRAD_FLOOR)) * gk;
                        let t = y.row(k);
                        let y0 = y0s[k];
                        if re {
                            let dst = &mut ge_tmp[n * cols..(n + 1) * cols];
                            for i in 0..cols {
                                dst[i] += dq * (2.0 * y0 / x0 * s[i] - 2.0 * t[i]);
                            }
                        }
                        if rc {
                            let dst = &mut gc_tmp[k * cols..(k + 1) * cols];
                            for i in 0..cols {
                                dst[i] += dq * (2.0 * x0 / y0 * t[i] - 2.0 * s[i]);
                            }
                        }
                    }
                }
                if let Some(ge) = self.buf(grads, *e) {
                    add_into(ge, &ge_tmp);
                }
                if let Some(gc) = self.buf(grads, *c) {
                    add_into(gc, &gc_tmp);
                }
            }
            Op::EuclidScores { e, c } => {
                let (x, y) = (self.val(*e), self.val(*c));
                let cols = x.cols;
                let re = self.nodes[e.0].requires_grad;
                let rc = self.nodes[c.0].requires_grad;
                let mut ge_tmp = vec![0.0; if re { x.len() } else { 0 }];
                let mut gc_tmp = vec![0.0; if rc { y.len() } else { 0 }];
                for n in 0..x.rows {
                    for k in 0..y.rows {
                        let gk = g[n * y.rows + k];
                        if gk == 0.0 {
                            continue;
                        }
                        let d = -out.data[n * y.rows + k];
                        let coef = -gk / fm::sqrt((d * d).max(SQRT_GRAD_FLOOR));
                        for i in 0..cols {
                            let diff = x.get(n, i) - y.get(k, i);
                            if re {
                                ge_tmp[n * cols + i] += coef * diff;
                            }
                            if rc {
                                gc_tmp[k * cols + i] -= coef * diff;
                            }
                        }
                    }
                }
                if let Some(ge) = self.buf(grads, *e) {
                    add_into(ge, &ge_tmp);
                }
                if let Some(gc) = self.buf(grads, *c) {
                    add_into(gc, &gc_tmp);
                }
            }
            Op::Recurrence { abar, u } => {
                let av = self.val(*abar);
                let (rows, cols) = av.shape();
                let mut gh = vec![0.0; rows * cols];
                let mut carry = vec![0.0; cols];
                for t in (0..rows).rev() {
                    for j in 0..cols {
                        let v = g[t * cols + j] + carry[j];
                        gh[t * cols + j] = v;
                        carry[j] = av.get(t, j) * v;
                    }
                }
                if let Some(gu) = self.buf(grads, *u) {
                    add_into(gu, &gh);
                }
                if let Some(ga) = self.buf(grads, *abar) {
                    for t in 1..rows {
                        for j in 0..cols {
                            ga[t * cols + j] += gh[t * cols + j] * out.get(t - 1, j);
                        }
                    }
                }
            }
            Op::ZohInput { dt, a } => {
                let dv = self.val(*dt);
                if let Some(gd) = self.buf(grads, *dt) {
                    for i in 0..g.len() {
                        let aj = a[i % dv.cols];
                        gd[i] += g[i] * zoh_gain_derivative(dv.data[i], aj);
                    }
                }
            }
            Op::Attention { q, k, v, heads } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let (rows, cols) = qv.shape();
                let dh = cols / heads;
                let scale = 1.0 / fm::sqrt(dh as f64);
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                let mut w = vec![0.0; rows];
                let mut dw = vec![0.0; rows];
                for row in 0..rows {
                    for h in 0..*heads {
                        let r = h * dh..(h + 1) * dh;
                        let qr = &qv.row(row)[r.clone()];
                        for j in 0..=row {
                            w[j] = fm::dot(qr, &kv.row(j)[r.clone()]) * scale;
                        }
                        softmax_in_place(&mut w[..=row]);
                        let go = &g[row * cols + h * dh..row * cols + (h + 1) * dh];
                        let mut wdw = 0.0;
                        for j in 0..=row {
                            dw[j] = fm::dot(go, &vv.row(j)[r.clone()]);
                            wdw += w[j] * dw[j];
                            let dst = &mut gv[j * cols + h * dh..j * cols + (h + 1) * dh];
                            dst.iter_mut().zip(go).for_each(|(d, x)| *d += w[j] * x);
                        }
                        for j in 0..=row {
                            let ds = w[j] * (dw[j] - wdw) * scale;
                            let kr = &kv.row(j)[r.clone()];
                            let dq = &mut gq[row * cols + h * dh..row * cols + (h + 1) * dh];
                            dq.iter_mut().zip(kr).for_each(|(d, x)| *d += ds * x);
                            let dk = &mut gk[j * cols + h * dh..j * cols + (h + 1) * dh];
                            dk.iter_mut().zip(qr).for_each(|(d, x)| *d += ds * x);
                        }
                    }
                }
                if let Some(b) = self.buf(grads, *q) {
                    add_into(b, &gq);
                }
                if let Some(b) = self.buf(grads, *k) {
                    add_into(b, &gk);
                }
                if let Some(b) = self.buf(grads, *v) {
                    add_into(b, &gv);
                }
            }
            Op::SoftmaxCe { logits, labels } => {
                let z = self.val(*logits);
                if let Some(gz) = self.buf(grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        let mut p = z.row(r).to_vec();
                        softmax_in_place(&mut p);
                        p[y] -= 1.0;
                        let dst = &mut gz[r * z.cols..(r + 1) * z.cols];
                        dst.iter_mut().zip(&p).for_each(|(d, x)| *d += g[0] * x);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = fm::exp(*v - m);
        s += *v;
    }
    x.iter_mut().for_each(|v| *v /= s);
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + fm::ln(x.iter().map(|v| fm::exp(v - m)).sum::<f64>())
}

/// ZOH input gain for one channel.
pub fn zoh_gain(dt: f64, a: f64) -> f64 {
    let x = dt * a;
    if fm::abs(x) >= ZOH_TAYLOR_SWITCH {
        fm::expm1(x) / a
    } else {
        dt * (1.0 + x / 2.0 + x * x / 6.0)
    }
}

fn zoh_gain_derivative(dt: f64, a: f64) -> f64 {
    let x = dt * a;
    if fm::abs(x) >= ZOH_TAYLOR_SWITCH {
        fm::exp(x)
    } else {
        1.0 + x + x * x / 2.0
    }
}

#[cfg(test)]
mod tests;
