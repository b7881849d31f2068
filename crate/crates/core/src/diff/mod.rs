//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and enough information to push gradients back to its parents. Parents
//! always precede children, so a reverse sweep over the tape is a valid
//! topological order. Gradients accumulate additively when a node feeds
//! several consumers.

mod check;
mod params;

pub use check::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use params::{NamedTensor, ParamId, ParamStore};

use std::ops::AddAssign;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule of a user-defined op: `(parent values, output value,
/// output gradient) -> one gradient per parent`.
pub type BackwardFn = Box<dyn Fn(&[&Mat], &Mat, &Mat) -> Vec<Mat>>;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    DivBroadcast(Var, Var),
    Broadcast(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    GroupSoftmaxCols(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    LayerNorm(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    GroupSumRows(Var, usize),
    PairSum(Var, Var),
    Clamp(Var, f64, f64),
    PairRelu(Var, Var, Var),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

fn dims(m: &Mat) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
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
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Dot product with independent accumulators so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn pair_relu_backward(u: &Mat, v: &Mat, w: &Mat, g: &Mat) -> (Mat, Mat, Mat) {
    let (a, h) = u.dim();
    let (b, c) = (v.nrows(), w.ncols());
    let (cu, cv, cg) = (u.as_standard_layout(), v.as_standard_layout(), g.as_standard_layout());
    let (su, sv, sg) = (cu.as_slice().unwrap(), cv.as_slice().unwrap(), cg.as_slice().unwrap());
    let wt = w.t().as_standard_layout().into_owned();
    let swt = wt.as_slice().unwrap();
    let mut gu = vec![0.0; a * h];
    let mut gv = vec![0.0; b * h];
    let mut gwt = vec![0.0; c * h];
    if h > 0 && c > 0 {
        let (mut hidden, mut on, mut gh) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
        let mut grows = sg.chunks_exact(c);
        for (ui, gui) in su.chunks_exact(h).zip(gu.chunks_exact_mut(h)) {
            for (vj, gvj) in sv.chunks_exact(h).zip(gv.chunks_exact_mut(h)) {
                let go = grows.next().expect("a * b rows");
                for (((hk, ok), x), y) in hidden.iter_mut().zip(on.iter_mut()).zip(ui).zip(vj) {
                    let pre = x + y;
                    *hk = pre.max(0.0);
                    *ok = if pre > 0.0 { 1.0 } else { 0.0 };
                }
                gh.fill(0.0);
                for ((&gq, wq), gwq) in go.iter().zip(swt.chunks_exact(h)).zip(gwt.chunks_exact_mut(h)) {
                    for (((ghk, gwk), &wk), &hk) in gh.iter_mut().zip(gwq.iter_mut()).zip(wq).zip(&hidden) {
                        *ghk += gq * wk;
                        *gwk += gq * hk;
                    }
                }
                for (((gu_k, gv_k), &d), &ok) in gui.iter_mut().zip(gvj.iter_mut()).zip(&gh).zip(&on) {
                    let d = d * ok;
                    *gu_k += d;
                    *gv_k += d;
                }
            }
        }
    }
    let to = |shape, v| Mat::from_shape_vec(shape, v).expect("sized above");
    let gw = to((c, h), gwt).t().as_standard_layout().into_owned();
    (to((a, h), gu), to((b, h), gv), gw)
}

/// Expand `small` (1x1, 1xc or rx1) to `shape`.
fn expand(small: &Mat, shape: (usize, usize)) -> Mat {
    small
        .broadcast(shape)
        .expect("broadcast shape validated at construction")
        .to_owned()
}

/// Sum `g` down to the shape of a broadcast operand.
fn reduce_to(g: &Mat, shape: (usize, usize)) -> Mat {
    match (shape.0 == 1 && g.nrows() != 1, shape.1 == 1 && g.ncols() != 1) {
        (false, false) => g.clone(),
        (true, false) => g.sum_axis(Axis(0)).insert_axis(Axis(0)),
        (false, true) => g.sum_axis(Axis(1)).insert_axis(Axis(1)),
        (true, true) => Mat::from_elem((1, 1), g.sum()),
    }
}

fn can_broadcast(small: (usize, usize), big: (usize, usize)) -> bool {
    (small.0 == big.0 || small.0 == 1) && (small.1 == big.1 || small.1 == 1)
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as data.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Gradient from the last [`Graph::backward`] call, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn unary(&mut self, x: Var, value: Mat, op: Op) -> Var {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Mat, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{} vs {}", dims(self.value(a)), dims(self.value(b))),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape("matmul", format!("{} · {}", dims(va), dims(vb))));
        }
        let out = va.dot(vb);
        Ok(self.binary(a, b, out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::shape("matmul_t", format!("{} · ({})ᵀ", dims(va), dims(vb))));
        }
        let out = va.dot(&vb.t());
        Ok(self.binary(a, b, out, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).t().to_owned();
        self.unary(x, out, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.binary(a, b, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.binary(a, b, out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.binary(a, b, out, Op::Mul(a, b)))
    }

    /// `a + b` where `b` is 1x1, 1xc or rx1 and broadcast over `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !can_broadcast(sb, sa) {
            return Err(Error::shape("add_broadcast", format!("{sb:?} onto {sa:?}")));
        }
        let out = self.value(a) + self.value(b);
        Ok(self.binary(a, b, out, Op::AddBroadcast(a, b)))
    }

    /// `a ⊙ b` where `b` is 1x1, 1xc or rx1 and broadcast over `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !can_broadcast(sb, sa) {
            return Err(Error::shape("mul_broadcast", format!("{sb:?} onto {sa:?}")));
        }
        let out = self.value(a) * self.value(b);
        Ok(self.binary(a, b, out, Op::MulBroadcast(a, b)))
    }

    /// `a / b` where `b` is 1x1, 1xc or rx1 and broadcast over `a`.
    pub fn div_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !can_broadcast(sb, sa) {
            return Err(Error::shape("div_broadcast", format!("{sb:?} onto {sa:?}")));
        }
        let out = self.value(a) / self.value(b);
        Ok(self.binary(a, b, out, Op::DivBroadcast(a, b)))
    }

    pub fn broadcast(&mut self, x: Var, shape: (usize, usize)) -> Result<Var> {
        let sx = self.shape(x);
        if !can_broadcast(sx, shape) {
            return Err(Error::shape("broadcast", format!("{sx:?} to {shape:?}")));
        }
        let out = expand(self.value(x), shape);
        Ok(self.unary(x, out, Op::Broadcast(x)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        self.unary(x, out, Op::Scale(x, c))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let rows = self.shape(first).0;
        if let Some(bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("{} rows vs {}", rows, self.shape(*bad).0),
            ));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `[from, to)`.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let cols = self.shape(x).1;
        if from >= to || to > cols {
            return Err(Error::shape("slice_cols", format!("{from}..{to} of {cols} columns")));
        }
        let out = self.value(x).slice(s![.., from..to]).to_owned();
        Ok(self.unary(x, out, Op::SliceCols(x, from)))
    }

    /// Softmax along each row, max-shifted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("owned rows are contiguous"));
        }
        self.unary(x, out, Op::SoftmaxRows(x))
    }

    /// Softmax down each column within consecutive blocks of `group` rows.
    pub fn group_softmax_cols(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if group == 0 || r % group != 0 {
            return Err(Error::shape("group_softmax_cols", format!("{r} rows in groups of {group}")));
        }
        let mut out = self.value(x).clone();
        let mut buf = vec![0.0; group];
        for b in 0..r / group {
            for j in 0..c {
                for k in 0..group {
                    buf[k] = out[[b * group + k, j]];
                }
                softmax_in_place(&mut buf);
                for k in 0..group {
                    out[[b * group + k, j]] = buf[k];
                }
            }
        }
        Ok(self.unary(x, out, Op::GroupSoftmaxCols(x, group)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.unary(x, out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        self.unary(x, out, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(softplus);
        self.unary(x, out, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::exp);
        self.unary(x, out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::ln);
        self.unary(x, out, Op::Log(x))
    }

    /// Per-row standardisation to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.ncols() as f64;
        let mut out = v.clone();
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|a| (a - mean) * is);
            inv_std.push(is);
        }
        self.unary(x, out, Op::LayerNorm(x, inv_std))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(x).sum());
        self.unary(x, out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Mat::from_elem((1, 1), v.sum() / v.len() as f64);
        self.unary(x, out, Op::Mean(x))
    }

    /// Column sums, r x c -> 1 x c.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(x, out, Op::SumRows(x))
    }

    /// Row sums, r x c -> r x 1.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(x, out, Op::SumCols(x))
    }

    /// Sum consecutive blocks of `group` rows: r x c -> (r / group) x c.
    pub fn group_sum_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if group == 0 || r % group != 0 {
            return Err(Error::shape("group_sum_rows", format!("{r} rows in groups of {group}")));
        }
        let v = self.value(x);
        let out = v
            .to_shape((r / group, group, c))
            .expect("row-major reshape")
            .sum_axis(Axis(1));
        Ok(self.unary(x, out, Op::GroupSumRows(x, group)))
    }

    /// All pairwise row sums: `out[i * b + j] = u[i] + v[j]` for u (a x h), v (b x h).
    pub fn pair_sum(&mut self, u: Var, v: Var) -> Result<Var> {
        let (vu, vv) = (self.value(u), self.value(v));
        if vu.ncols() != vv.ncols() {
            return Err(Error::shape("pair_sum", format!("{} with {}", dims(vu), dims(vv))));
        }
        let (a, b, h) = (vu.nrows(), vv.nrows(), vu.ncols());
        let cu = vu.as_standard_layout();
        let cv = vv.as_standard_layout();
        let (su, sv) = (cu.as_slice().expect("standard layout"), cv.as_slice().expect("standard layout"));
        let mut out = Vec::with_capacity(a * b * h);
        for ui in su.chunks_exact(h.max(1)).take(a) {
            for vj in sv.chunks_exact(h.max(1)).take(b) {
                out.extend(ui.iter().zip(vj).map(|(x, y)| x + y));
            }
        }
        let out = Mat::from_shape_vec((a * b, h), out).expect("a * b * h values");
        Ok(self.binary(u, v, out, Op::PairSum(u, v)))
    }

    /// `out[i * b + j] = relu(u[i] + v[j]) · w` without materialising the
    /// (a·b) x h hidden layer; u (a x h), v (b x h), w (h x c).
    pub fn pair_relu_matmul(&mut self, u: Var, v: Var, w: Var) -> Result<Var> {
        let (vu, vv, vw) = (self.value(u), self.value(v), self.value(w));
        if vu.ncols() != vv.ncols() || vu.ncols() != vw.nrows() {
            return Err(Error::shape(
                "pair_relu_matmul",
                format!("{} with {} and {}", dims(vu), dims(vv), dims(vw)),
            ));
        }
        let (a, b, h, c) = (vu.nrows(), vv.nrows(), vu.ncols(), vw.ncols());
        let (cu, cv) = (vu.as_standard_layout(), vv.as_standard_layout());
        let (su, sv) = (cu.as_slice().unwrap(), cv.as_slice().unwrap());
        let wt = vw.t().as_standard_layout().into_owned();
        let swt = wt.as_slice().unwrap();
        let mut out = vec![0.0; a * b * c];
        let mut hidden = vec![0.0; h];
        if h > 0 && c > 0 {
            let mut rows = out.chunks_exact_mut(c);
            for ui in su.chunks_exact(h) {
                for vj in sv.chunks_exact(h) {
                    for ((hk, x), y) in hidden.iter_mut().zip(ui).zip(vj) {
                        *hk = (x + y).max(0.0);
                    }
                    let o = rows.next().expect("a * b rows");
                    for (oq, wq) in o.iter_mut().zip(swt.chunks_exact(h)) {
                        *oq = dot(&hidden, wq);
                    }
                }
            }
        }
        let out = Mat::from_shape_vec((a * b, c), out).expect("a * b * c values");
        let rg = self.rg(u) || self.rg(v) || self.rg(w);
        Ok(self.push(out, Op::PairRelu(u, v, w), rg))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).mapv(|v| v.clamp(lo, hi));
        self.unary(x, out, Op::Clamp(x, lo, hi))
    }

    /// Op with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, parents: &[Var], value: Mat, backward: BackwardFn) -> Var {
        let rg = parents.iter().any(|&p| self.rg(p));
        self.push(value, Op::Custom(parents.to_vec(), backward), rg)
    }

    /// Reverse sweep from a 1x1 `loss`; afterwards [`Graph::grad`] holds
    /// d loss / d node for every node on a path to the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be a 1x1 scalar, got {}x{}", shape.0, shape.1),
            ));
        }
        let mut grads: Vec<Option<Mat>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.push_back(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn push_back(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, gv: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &gv,
                slot => *slot = Some(gv),
            }
        };
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if need(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if need(*a) {
                    acc(*a, g.dot(val(*b)));
                }
                if need(*b) {
                    acc(*b, g.t().dot(val(*a)));
                }
            }
            Op::Transpose(x) => acc(*x, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc(*a, g * val(*b));
                }
                if need(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, g.clone());
                if need(*b) {
                    acc(*b, reduce_to(g, val(*b).dim()));
                }
            }
            Op::MulBroadcast(a, b) => {
                if need(*a) {
                    acc(*a, g * val(*b));
                }
                if need(*b) {
                    acc(*b, reduce_to(&(g * val(*a)), val(*b).dim()));
                }
            }
            Op::Broadcast(x) => acc(*x, reduce_to(g, val(*x).dim())),
            Op::Scale(x, c) => acc(*x, g * *c),
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if need(p) {
                        acc(p, g.slice(s![.., at..at + w]).to_owned());
                    }
                    at += w;
                }
            }
            Op::SliceCols(x, from) => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let cols = s![.., *from..*from + g.ncols()];
                match &mut grads[x.0] {
                    Some(existing) => existing.slice_mut(cols).add_assign(g),
                    slot => {
                        let mut gx = Mat::zeros(val(*x).dim());
                        gx.slice_mut(cols).assign(g);
                        *slot = Some(gx);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let mut gx = g * y;
                for (mut row, yr) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|r, &yv| *r -= yv * dot);
                }
                acc(*x, gx);
            }
            Op::GroupSoftmaxCols(x, group) => {
                let mut gx = g * y;
                let (r, c) = y.dim();
                for b in 0..r / group {
                    for j in 0..c {
                        let rows = b * group..(b + 1) * group;
                        let dot: f64 = rows.clone().map(|k| gx[[k, j]]).sum();
                        for k in rows {
                            gx[[k, j]] -= y[[k, j]] * dot;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(val(*x)).for_each(|gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                acc(*x, gx);
            }
            Op::Sigmoid(x) => acc(*x, Zip::from(g).and(y).map_collect(|&gv, &yv| gv * yv * (1.0 - yv))),
            Op::Softplus(x) => acc(*x, Zip::from(g).and(val(*x)).map_collect(|&gv, &xv| gv * sigmoid(xv))),
            Op::Exp(x) => acc(*x, g * y),
            Op::Log(x) => acc(*x, g / val(*x)),
            Op::DivBroadcast(a, b) => {
                let vb = val(*b);
                if need(*a) {
                    acc(*a, g / vb);
                }
                if need(*b) {
                    let gb = -(g * y) / vb;
                    acc(*b, reduce_to(&gb, vb.dim()));
                }
            }
            Op::LayerNorm(x, inv_std) => {
                let c = y.ncols() as f64;
                let mut gx = g.clone();
                for ((mut row, yr), is) in gx.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                    let mean_g = row.sum() / c;
                    let mean_gy = row.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
                    Zip::from(&mut row)
                        .and(&yr)
                        .for_each(|gv, &yv| *gv = is * (*gv - mean_g - yv * mean_gy));
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, Mat::from_elem(val(*x).dim(), g[[0, 0]])),
            Op::Mean(x) => {
                let v = val(*x);
                acc(*x, Mat::from_elem(v.dim(), g[[0, 0]] / v.len() as f64));
            }
            Op::SumRows(x) | Op::SumCols(x) => acc(*x, expand(g, val(*x).dim())),
            Op::GroupSumRows(x, group) => {
                let (r, c) = val(*x).dim();
                let gx = Mat::from_shape_fn((r, c), |(i, j)| g[[i / group, j]]);
                acc(*x, gx);
            }
            Op::PairSum(u, v) => {
                let (a, b) = (val(*u).nrows(), val(*v).nrows());
                let h = g.ncols();
                let g3 = g.to_shape((a, b, h)).expect("row-major reshape");
                if need(*u) {
                    acc(*u, g3.sum_axis(Axis(1)));
                }
                if need(*v) {
                    acc(*v, g3.sum_axis(Axis(0)));
                }
            }
            Op::PairRelu(u, v, w) => {
                let (gu, gv, gw) = pair_relu_backward(val(*u), val(*v), val(*w), g);
                if need(*u) {
                    acc(*u, gu);
                }
                if need(*v) {
                    acc(*v, gv);
                }
                if need(*w) {
                    acc(*w, gw);
                }
            }
            Op::Clamp(x, lo, hi) => {
                let gx = Zip::from(g)
                    .and(val(*x))
                    .map_collect(|&gv, &xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 });
                acc(*x, gx);
            }
            Op::Custom(parents, backward) => {
                let pv: Vec<&Mat> = parents.iter().map(|&p| val(p)).collect();
                let gs = backward(&pv, y, g);
                for (&p, gp) in parents.iter().zip(gs) {
                    debug_assert_eq!(gp.dim(), val(p).dim(), "custom backward returned a mis-shaped gradient");
                    acc(p, gp);
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
