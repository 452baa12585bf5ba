//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the tape in reverse creation order, so a node's gradient is complete by the
//! time it is propagated to its inputs.

use super::gru::{gru_backward, gru_forward, GruCache};
use super::linalg::{gemm, MatRef};
use super::param::{ParamId, ParamStore};
use super::{GradError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSumExp(Var),
    SumLast(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    WeightNorm { v: Var, g: Var, norms: Vec<f64> },
    GruSequence { x: Var, u_zr: Var, u_h: Var, batch: usize, cache: GruCache },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn last_axis_replaced(shape: &[usize], n: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = n,
        None => s.push(n),
    }
    s
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var, GradError> {
        if !value.all_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, GradError> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Input whose gradient is recorded (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Result<Var, GradError> {
        self.push(t, Op::Leaf, true, "variable")
    }

    /// Copies a trainable parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, GradError> {
        let mut t = store.get(id).clone();
        t.zero_grad();
        let trainable = store.is_trainable(id);
        self.push(t, Op::Param(id), trainable, "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var, GradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let bm = MatRef::new(tb.data(), tb.shape()[0], tb.shape()[1]);
        let bm = if b_t { bm.t() } else { bm };
        let (kb, n) = if b_t {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(ta.data(), m, k), bm, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, b_t }, rg, "matmul")
    }

    /// Checks `b` is either shaped like `a` or like `a` without its leading axis.
    fn broadcast_check(&self, a: Var, b: Var, op: &'static str) -> Result<(), GradError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb || (!sa.is_empty() && &sa[1..] == sb) {
            Ok(())
        } else {
            Err(GradError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, GradError> {
        self.broadcast_check(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let nb = bd.len();
        let out: Vec<f64> = if nb == ta.len() {
            ta.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            ta.data()
                .chunks(nb)
                .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let t = Tensor::new(ta.shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, GradError> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape(), out)?;
        let rg = self.rg(a);
        self.push(t, op, rg, name)
    }

    /// `scale·a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, GradError> {
        self.unary(a, "affine", |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        self.affine(a, c, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, "sqrt", f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, GradError> {
        self.unary(a, "clamp", |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, GradError> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(ta.shape(), out)?;
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg, "softmax")
    }

    /// `log Σ exp` along the last axis; the last axis collapses to 1.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, GradError> {
        let ta = self.value(a);
        let out = ta.data().chunks(ta.cols()).map(logsumexp).collect();
        let t = Tensor::new(&last_axis_replaced(ta.shape(), 1), out)?;
        let rg = self.rg(a);
        self.push(t, Op::LogSumExp(a), rg, "logsumexp")
    }

    /// Sum along the last axis; the last axis collapses to 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, GradError> {
        let ta = self.value(a);
        let out = ta.data().chunks(ta.cols()).map(|r| r.iter().sum()).collect();
        let t = Tensor::new(&last_axis_replaced(ta.shape(), 1), out)?;
        let rg = self.rg(a);
        self.push(t, Op::SumLast(a), rg, "sum_last")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(GradError::Empty { op: "mean" });
        }
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Stacks 2-D parts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let first = parts.first().ok_or(GradError::Empty { op: "concat" })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(GradError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(*first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&[rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Joins 2-D parts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let first = parts.first().ok_or(GradError::Empty { op: "concat" })?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(GradError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(*first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&[rows, cols], data)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, GradError> {
        let ta = self.value(a);
        if start > end || end > ta.rows() {
            return Err(GradError::ShapeMismatch {
                op: "slice_rows",
                left: ta.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let c = ta.cols();
        let data = ta.data()[start * c..end * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&[end - start, c], data)?, Op::SliceRows(a, start), rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, GradError> {
        let ta = self.value(a);
        let c = ta.cols();
        if start > end || end > c {
            return Err(GradError::ShapeMismatch {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let data: Vec<f64> = ta.data().chunks(c).flat_map(|r| r[start..end].iter().copied()).collect();
        let rows = ta.rows();
        let rg = self.rg(a);
        self.push(Tensor::new(&[rows, end - start], data)?, Op::SliceCols(a, start), rg, "slice_cols")
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var, GradError> {
        let ta = self.value(a);
        let (rows, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= rows {
                return Err(GradError::ShapeMismatch {
                    op: "gather_rows",
                    left: ta.shape().to_vec(),
                    right: vec![i],
                });
            }
            data.extend_from_slice(ta.row(i));
        }
        let rg = self.rg(a);
        let n = index.len();
        self.push(Tensor::new(&[n, c], data)?, Op::GatherRows(a, index), rg, "gather_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[c, r], data)?, Op::Transpose(a), rg, "transpose")
    }

    /// Row-wise weight normalization: `w_r = g_r · v_r / ‖v_r‖`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var, GradError> {
        let (tv, tg) = (self.value(v), self.value(g));
        let (rows, c) = (tv.rows(), tv.cols());
        if tg.len() != rows {
            return Err(GradError::ShapeMismatch {
                op: "weight_norm",
                left: tv.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * c);
        for (r, row) in tv.data().chunks(c).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(GradError::ZeroRowNorm { row: r });
            }
            let s = tg.data()[r] / n;
            out.extend(row.iter().map(|x| x * s));
            norms.push(n);
        }
        let t = Tensor::new(tv.shape(), out)?;
        let rg = self.rg(v) || self.rg(g);
        self.push(t, Op::WeightNorm { v, g, norms }, rg, "weight_norm")
    }

    /// GRU recurrence over time-major input projections (`steps·batch × 3H`)
    /// from a zero state; returns every state (`steps·batch × H`).
    pub fn gru_sequence(&mut self, x: Var, u_zr: Var, u_h: Var, batch: usize) -> Result<Var, GradError> {
        let (tx, tzr, th) = (self.value(x), self.value(u_zr), self.value(u_h));
        let hd = th.rows();
        let ok = th.shape() == [hd, hd]
            && tzr.shape() == [2 * hd, hd]
            && tx.shape().len() == 2
            && tx.cols() == 3 * hd
            && batch > 0
            && tx.rows() % batch == 0;
        if !ok {
            return Err(GradError::ShapeMismatch {
                op: "gru_sequence",
                left: tx.shape().to_vec(),
                right: vec![batch, hd],
            });
        }
        let rows = tx.rows();
        let (out, cache) = gru_forward(tx.data(), tzr.data(), th.data(), batch, hd);
        let rg = self.rg(x) || self.rg(u_zr) || self.rg(u_h);
        let op = Op::GruSequence { x, u_zr, u_h, batch, cache };
        self.push(Tensor::new(&[rows, hd], out)?, op, rg, "gru_sequence")
    }

    /// Populates gradients of the scalar `out` with respect to every node.
    pub fn backward(&mut self, out: Var) -> Result<(), GradError> {
        if self.backward_done {
            return Err(GradError::BackwardTwice);
        }
        if self.value(out).len() != 1 {
            return Err(GradError::NotScalar {
                shape: self.value(out).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Adds parameter gradients from the last backward pass into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                if node.requires_grad {
                    store.get_mut(*id).accumulate_grad(g);
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, b_t } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let (br, bc) = (tb.shape()[0], tb.shape()[1]);
                let n = if *b_t { br } else { bc };
                let gm = MatRef::new(g, m, n);
                if self.rg(*a) {
                    let da = self.acc(grads, *a);
                    let bm = MatRef::new(tb.data(), br, bc);
                    // dA = dC · Bᵀ (or dC · B when B is stored transposed)
                    gemm(gm, if *b_t { bm } else { bm.t() }, da, 1.0);
                }
                if self.rg(*b) {
                    let db = self.acc(grads, *b);
                    let am = MatRef::new(ta.data(), m, k);
                    if *b_t {
                        gemm(gm.t(), am, db, 1.0);
                    } else {
                        gemm(am.t(), gm, db, 1.0);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    add_into(self.acc(grads, *a), g, 1.0);
                }
                if self.rg(*b) {
                    let db = self.acc(grads, *b);
                    reduce_into(db, g, |_, gv| sign * gv);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let da = self.acc(grads, *a);
                    let nb = bd.len();
                    for (j, (d, gv)) in da.iter_mut().zip(g).enumerate() {
                        *d += gv * bd[j % nb];
                    }
                }
                if self.rg(*b) {
                    let db = self.acc(grads, *b);
                    reduce_into(db, g, |j, gv| gv * ad[j]);
                }
            }
            Op::Div(a, b) => {
                let bd = self.value(*b).data();
                let nb = bd.len();
                if self.rg(*a) {
                    let da = self.acc(grads, *a);
                    for (j, (d, gv)) in da.iter_mut().zip(g).enumerate() {
                        *d += gv / bd[j % nb];
                    }
                }
                if self.rg(*b) {
                    let db = self.acc(grads, *b);
                    reduce_into(db, g, |j, gv| -gv * y[j] / bd[j % nb]);
                }
            }
            Op::Affine(a, s) => add_into(self.acc(grads, *a), g, *s),
            Op::Tanh(a) => self.elementwise(grads, *a, g, |j| 1.0 - y[j] * y[j]),
            Op::Sigmoid(a) => self.elementwise(grads, *a, g, |j| y[j] * (1.0 - y[j])),
            Op::Exp(a) => self.elementwise(grads, *a, g, |j| y[j]),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.elementwise(grads, *a, g, |j| 1.0 / x[j])
            }
            Op::Sqrt(a) => self.elementwise(grads, *a, g, |j| 0.5 / y[j]),
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.elementwise(grads, *a, g, |j| 2.0 * x[j])
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                self.elementwise(grads, *a, g, |j| if x[j] >= *lo && x[j] <= *hi { 1.0 } else { 0.0 })
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let da = self.acc(grads, *a);
                for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a).data();
                let c = self.value(*a).cols();
                let da = self.acc(grads, *a);
                for (r, (dr, xr)) in da.chunks_mut(c).zip(x.chunks(c)).enumerate() {
                    for (d, xv) in dr.iter_mut().zip(xr) {
                        *d += g[r] * (xv - y[r]).exp();
                    }
                }
            }
            Op::SumLast(a) => {
                let c = self.value(*a).cols();
                let da = self.acc(grads, *a);
                for (r, dr) in da.chunks_mut(c).enumerate() {
                    dr.iter_mut().for_each(|d| *d += g[r]);
                }
            }
            Op::Sum(a) => self.acc(grads, *a).iter_mut().for_each(|d| *d += g[0]),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a).iter_mut().for_each(|d| *d += g[0] / n)
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        add_into(self.acc(grads, p), &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let dp = self.acc(grads, p);
                        for (dr, gr) in dp.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(dr, &gr[off..off + c], 1.0);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.cols();
                let da = self.acc(grads, *a);
                add_into(&mut da[start * c..start * c + g.len()], g, 1.0);
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).cols();
                let w = node.value.cols();
                let da = self.acc(grads, *a);
                for (dr, gr) in da.chunks_mut(c).zip(g.chunks(w)) {
                    add_into(&mut dr[*start..start + w], gr, 1.0);
                }
            }
            Op::GatherRows(a, index) => {
                let c = node.value.cols();
                let da = self.acc(grads, *a);
                for (&src, gr) in index.iter().zip(g.chunks(c)) {
                    add_into(&mut da[src * c..(src + 1) * c], gr, 1.0);
                }
            }
            Op::Reshape(a) => add_into(self.acc(grads, *a), g, 1.0),
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let da = self.acc(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::GruSequence { .. } => self.gru_grads(node, g, grads),
            Op::WeightNorm { v, g: gain, norms } => {
                let tv = self.value(*v);
                let gd = self.value(*gain).data();
                let c = tv.cols();
                let dots: Vec<f64> = g
                    .chunks(c)
                    .zip(tv.data().chunks(c))
                    .map(|(gr, vr)| gr.iter().zip(vr).map(|(p, q)| p * q).sum())
                    .collect();
                if self.rg(*gain) {
                    let dg = self.acc(grads, *gain);
                    for r in 0..dg.len() {
                        dg[r] += dots[r] / norms[r];
                    }
                }
                if self.rg(*v) {
                    let dv = self.acc(grads, *v);
                    for (r, (dr, (gr, vr))) in dv.chunks_mut(c).zip(g.chunks(c).zip(tv.data().chunks(c))).enumerate() {
                        let n = norms[r];
                        let s = gd[r] / n;
                        let proj = dots[r] / (n * n);
                        for ((d, gv), vv) in dr.iter_mut().zip(gr).zip(vr) {
                            *d += s * (gv - proj * vv);
                        }
                    }
                }
            }
        }
    }

    fn gru_grads(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let Op::GruSequence { x, u_zr, u_h, batch, cache } = &node.op else { return };
        let hd = self.value(*u_h).rows();
        let mut dx = self.rg(*x).then(|| vec![0.0; self.value(*x).len()]);
        let mut dzr = self.rg(*u_zr).then(|| vec![0.0; self.value(*u_zr).len()]);
        let mut dh = self.rg(*u_h).then(|| vec![0.0; self.value(*u_h).len()]);
        gru_backward(
            g,
            node.value.data(),
            cache,
            self.value(*u_zr).data(),
            self.value(*u_h).data(),
            *batch,
            hd,
            dx.as_deref_mut(),
            dzr.as_deref_mut(),
            dh.as_deref_mut(),
        );
        for (v, d) in [(*x, dx), (*u_zr, dzr), (*u_h, dh)] {
            if let Some(d) = d {
                add_into(self.acc(grads, v), &d, 1.0);
            }
        }
    }

    fn elementwise(&self, grads: &mut [Option<Vec<f64>>], a: Var, g: &[f64], dydx: impl Fn(usize) -> f64) {
        let da = self.acc(grads, a);
        for (j, (d, gv)) in da.iter_mut().zip(g).enumerate() {
            *d += gv * dydx(j);
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    dst.iter_mut().zip(src).for_each(|(d, v)| *d += s * v);
}

/// Accumulates `f(j, g[j])` into `dst`, folding over the leading axis when
/// `dst` is a broadcast operand.
fn reduce_into(dst: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    let n = dst.len();
    for (j, &gv) in g.iter().enumerate() {
        dst[j % n] += f(j, gv);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
