use super::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Exp(Var),
    Square(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Sqrt(Var),
    Relu(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    SumCols(Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    AddRow(Var, Var),
    PairwiseSqDist {
        x: Var,
        e: Var,
        w: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Powf(..) => "powf",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::SumCols(..) => "sum_cols",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleCols(..) => "scale_cols",
            Op::AddRow(..) => "add_row",
            Op::PairwiseSqDist { .. } => "pairwise_sq_dist",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleRows(a, b)
            | Op::ScaleCols(a, b)
            | Op::AddRow(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Neg(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Powf(a, _)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::ClampMin(a, _)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::MeanRows(a)
            | Op::SumCols(a) => vec![a],
            Op::PairwiseSqDist { x, e, w } => vec![x, e, w],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so parents always precede children and
/// the backward sweep is a plain reverse iteration.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data[0]
    } else {
        t.data[i]
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.shape[0], t.shape[1]))
    } else {
        Err(Error::shape(op, t.shape(), &[]))
    }
}

impl Tape {
    /// A tape that rejects NaN/Inf in every recorded value.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// A tape without the per-op finiteness scan.
    pub fn unchecked() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.record(Op::Leaf, t, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.record(Op::Leaf, t, false)
    }

    fn record(&mut self, op: Op, value: Tensor, leaf_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = match op {
            Op::Leaf => leaf_grad,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        self.record(op, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = ta.matmul(tb)?;
        self.push(Op::MatMul(a, b), out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        require_matrix("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta, tb)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        Tensor::new(shape, data)
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), out)
    }

    /// Hadamard product; either side may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), out)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(Op::Powf(a, p), out)
    }

    /// Square root. The backward pass uses a zero subgradient at 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    /// `max(x, lo)` with zero gradient where `x < lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(lo));
        self.push(Op::ClampMin(a, lo), out)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = require_matrix("softmax_rows", t)?;
        if n == 0 {
            return Err(Error::Domain("softmax_rows over zero columns".into()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Domain("sum over an empty tensor".into()));
        }
        let s = t.data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Domain("mean over an empty tensor".into()));
        }
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// Sum of each row: `m x n -> m x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.row_reduce("sum_rows", a, false)?;
        self.push(Op::SumRows(a), out)
    }

    /// Mean of each row: `m x n -> m x 1`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.row_reduce("mean_rows", a, true)?;
        self.push(Op::MeanRows(a), out)
    }

    fn row_reduce(&self, op: &'static str, a: Var, mean: bool) -> Result<Tensor> {
        let t = self.value(a);
        let (m, n) = require_matrix(op, t)?;
        if n == 0 {
            return Err(Error::Domain(format!("{op} over zero columns")));
        }
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        let out = (0..m)
            .map(|i| t.data[i * n..(i + 1) * n].iter().sum::<f64>() * scale)
            .collect();
        Ok(Tensor::column(out))
    }

    /// Sum of each column: `m x n -> 1 x n`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = require_matrix("sum_cols", t)?;
        if m == 0 {
            return Err(Error::Domain("sum_cols over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&t.data[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        self.push(Op::SumCols(a), Tensor::row(out))
    }

    /// `diag(v) * a` for an `m x 1` column `v`.
    pub fn scale_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        let (m, n) = require_matrix("scale_rows", ta)?;
        if tv.shape() != [m, 1] {
            return Err(Error::shape("scale_rows", ta.shape(), tv.shape()));
        }
        let mut out = ta.data.clone();
        for i in 0..m {
            let s = tv.data[i];
            for x in &mut out[i * n..(i + 1) * n] {
                *x *= s;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(Op::ScaleRows(a, v), out)
    }

    /// `a * diag(v)` for a `1 x n` row `v`.
    pub fn scale_cols(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        let (m, n) = require_matrix("scale_cols", ta)?;
        if tv.shape() != [1, n] {
            return Err(Error::shape("scale_cols", ta.shape(), tv.shape()));
        }
        let mut out = ta.data.clone();
        for i in 0..m {
            for (x, s) in out[i * n..(i + 1) * n].iter_mut().zip(&tv.data) {
                *x *= s;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(Op::ScaleCols(a, v), out)
    }

    /// Adds the `1 x n` row `b` to every row of `a` (a bias term).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = require_matrix("add_row", ta)?;
        if tb.shape() != [1, n] {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let mut out = ta.data.clone();
        for i in 0..m {
            for (x, s) in out[i * n..(i + 1) * n].iter_mut().zip(&tb.data) {
                *x += s;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(Op::AddRow(a, b), out)
    }

    /// `d_ij = sum_k w_k (x_ik - e_jk)^2` for `x: n x h`, `e: m x h`, `w: h x 1`.
    pub fn pairwise_sq_dist(&mut self, x: Var, e: Var, w: Var) -> Result<Var> {
        let (tx, te, tw) = (self.value(x), self.value(e), self.value(w));
        let (n, h) = require_matrix("pairwise_sq_dist", tx)?;
        let (m, he) = require_matrix("pairwise_sq_dist", te)?;
        if h != he {
            return Err(Error::shape("pairwise_sq_dist", tx.shape(), te.shape()));
        }
        if tw.shape() != [h, 1] {
            return Err(Error::shape("pairwise_sq_dist", tx.shape(), tw.shape()));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xi = &tx.data[i * h..(i + 1) * h];
            for j in 0..m {
                let ej = &te.data[j * h..(j + 1) * h];
                let mut acc = 0.0;
                for k in 0..h {
                    let diff = xi[k] - ej[k];
                    acc += tw.data[k] * diff * diff;
                }
                out[i * m + j] = acc;
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        self.push(Op::PairwiseSqDist { x, e, w }, out)
    }

    /// Mean negative log-likelihood of `targets` (pairs of `(row, class)`)
    /// under a row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[(usize, usize)],
    ) -> Result<Var> {
        let t = self.value(logits);
        let (m, c) = require_matrix("softmax_cross_entropy", t)?;
        if targets.is_empty() {
            return Err(Error::Contract(
                "cross-entropy over an empty target set".into(),
            ));
        }
        let mut probs = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        for &(row, class) in targets {
            if row >= m || class >= c {
                return Err(Error::Contract(format!(
                    "target ({row}, {class}) outside logits of shape [{m}, {c}]"
                )));
            }
            let r = &t.data[row * c..(row + 1) * c];
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - r[class];
            probs.push(r.iter().map(|x| (x - lse).exp()).collect());
        }
        let loss = total / targets.len() as f64;
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Accumulates `contrib(i)` for each output element `i` into parent `p`,
    /// summing when `p` was broadcast from a single element.
    fn acc_elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        p: Var,
        len: usize,
        contrib: impl Fn(usize) -> f64,
    ) {
        if !self.wants(p) {
            return;
        }
        let broadcast = self.value(p).numel() != len;
        let buf = self.buf(grads, p);
        if broadcast {
            buf[0] += (0..len).map(&contrib).sum::<f64>();
        } else {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += contrib(i);
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        let len = g.len();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(a) {
                    let buf = self.buf(grads, a);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(g, n),
                        MatRef::transposed(&tb.data, n),
                        1.0,
                        buf,
                    );
                }
                if self.wants(b) {
                    let buf = self.buf(grads, b);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(&ta.data, k),
                        MatRef::row_major(g, n),
                        1.0,
                        buf,
                    );
                }
            }
            Op::Transpose(a) => {
                if self.wants(a) {
                    let (m, n) = (y.rows(), y.cols());
                    let buf = self.buf(grads, a);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_elementwise(grads, a, len, |i| g[i]);
                self.acc_elementwise(grads, b, len, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(grads, a, len, |i| g[i]);
                self.acc_elementwise(grads, b, len, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                self.acc_elementwise(grads, a, len, |i| g[i] * at(tb, i));
                self.acc_elementwise(grads, b, len, |i| g[i] * at(ta, i));
            }
            Op::Neg(a) => self.acc_elementwise(grads, a, len, |i| -g[i]),
            Op::Exp(a) => self.acc_elementwise(grads, a, len, |i| g[i] * y.data[i]),
            Op::Square(a) => {
                let x = self.value(a);
                self.acc_elementwise(grads, a, len, |i| 2.0 * x.data[i] * g[i]);
            }
            Op::Scale(a, c) => self.acc_elementwise(grads, a, len, |i| c * g[i]),
            Op::AddScalar(a) => self.acc_elementwise(grads, a, len, |i| g[i]),
            Op::Powf(a, p) => {
                let x = self.value(a);
                self.acc_elementwise(grads, a, len, |i| g[i] * p * x.data[i].powf(p - 1.0));
            }
            Op::Sqrt(a) => self.acc_elementwise(grads, a, len, |i| {
                if y.data[i] > 0.0 {
                    g[i] / (2.0 * y.data[i])
                } else {
                    0.0
                }
            }),
            Op::Relu(a) => {
                let x = self.value(a);
                self.acc_elementwise(grads, a, len, |i| if x.data[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::ClampMin(a, lo) => {
                let x = self.value(a);
                self.acc_elementwise(grads, a, len, |i| if x.data[i] >= lo { g[i] } else { 0.0 });
            }
            Op::SoftmaxRows(a) => {
                if self.wants(a) {
                    let (m, n) = (y.rows(), y.cols());
                    let buf = self.buf(grads, a);
                    for i in 0..m {
                        let yr = &y.data[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            buf[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(a) {
                    for b in self.buf(grads, a).iter_mut() {
                        *b += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.wants(a) {
                    let n = self.value(a).numel() as f64;
                    for b in self.buf(grads, a).iter_mut() {
                        *b += g[0] / n;
                    }
                }
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                if self.wants(a) {
                    let (m, n) = (self.value(a).rows(), self.value(a).cols());
                    let scale = match node.op {
                        Op::MeanRows(_) => 1.0 / n as f64,
                        _ => 1.0,
                    };
                    let buf = self.buf(grads, a);
                    for i in 0..m {
                        for b in &mut buf[i * n..(i + 1) * n] {
                            *b += g[i] * scale;
                        }
                    }
                }
            }
            Op::SumCols(a) => {
                if self.wants(a) {
                    let (m, n) = (self.value(a).rows(), self.value(a).cols());
                    let buf = self.buf(grads, a);
                    for i in 0..m {
                        for (b, gj) in buf[i * n..(i + 1) * n].iter_mut().zip(g) {
                            *b += gj;
                        }
                    }
                }
            }
            Op::ScaleRows(a, v) => {
                let (ta, tv) = (self.value(a), self.value(v));
                let (m, n) = (ta.rows(), ta.cols());
                if self.wants(a) {
                    let buf = self.buf(grads, a);
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[i * n + j] * tv.data[i];
                        }
                    }
                }
                if self.wants(v) {
                    let buf = self.buf(grads, v);
                    for i in 0..m {
                        buf[i] += (0..n)
                            .map(|j| g[i * n + j] * ta.data[i * n + j])
                            .sum::<f64>();
                    }
                }
            }
            Op::ScaleCols(a, v) => {
                let (ta, tv) = (self.value(a), self.value(v));
                let (m, n) = (ta.rows(), ta.cols());
                if self.wants(a) {
                    let buf = self.buf(grads, a);
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[i * n + j] * tv.data[j];
                        }
                    }
                }
                if self.wants(v) {
                    let buf = self.buf(grads, v);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j] * ta.data[i * n + j];
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                let (m, n) = (y.rows(), y.cols());
                if self.wants(a) {
                    for (d, s) in self.buf(grads, a).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.wants(b) {
                    let buf = self.buf(grads, b);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::PairwiseSqDist { x, e, w } => self.pairwise_backward(g, x, e, w, grads),
            Op::SoftmaxCrossEntropy {
                logits,
                ref targets,
                ref probs,
            } => {
                if self.wants(logits) {
                    let c = self.value(logits).cols();
                    let scale = g[0] / targets.len() as f64;
                    let buf = self.buf(grads, logits);
                    for (&(row, class), p) in targets.iter().zip(probs) {
                        for j in 0..c {
                            let onehot = if j == class { 1.0 } else { 0.0 };
                            buf[row * c + j] += scale * (p[j] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn pairwise_backward(&self, g: &[f64], x: Var, e: Var, w: Var, grads: &mut [Option<Vec<f64>>]) {
        let (tx, te, tw) = (self.value(x), self.value(e), self.value(w));
        let (n, h) = (tx.rows(), tx.cols());
        let m = te.rows();
        let row_sums: Vec<f64> = (0..n).map(|i| g[i * m..(i + 1) * m].iter().sum()).collect();
        let mut col_sums = vec![0.0; m];
        for i in 0..n {
            for (c, gij) in col_sums.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                *c += gij;
            }
        }
        // G E : n x h and G^T X : m x h
        let mut ge = vec![0.0; n * h];
        gemm(
            n,
            m,
            h,
            1.0,
            MatRef::row_major(g, m),
            MatRef::row_major(&te.data, h),
            0.0,
            &mut ge,
        );
        if self.wants(x) {
            let buf = self.buf(grads, x);
            for i in 0..n {
                for k in 0..h {
                    let idx = i * h + k;
                    buf[idx] += 2.0 * tw.data[k] * (tx.data[idx] * row_sums[i] - ge[idx]);
                }
            }
        }
        if self.wants(e) {
            let mut gtx = vec![0.0; m * h];
            gemm(
                m,
                n,
                h,
                1.0,
                MatRef::transposed(g, m),
                MatRef::row_major(&tx.data, h),
                0.0,
                &mut gtx,
            );
            let buf = self.buf(grads, e);
            for j in 0..m {
                for k in 0..h {
                    let idx = j * h + k;
                    buf[idx] += 2.0 * tw.data[k] * (te.data[idx] * col_sums[j] - gtx[idx]);
                }
            }
        }
        if self.wants(w) {
            let buf = self.buf(grads, w);
            for (k, b) in buf.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..n {
                    let xik = tx.data[i * h + k];
                    acc += row_sums[i] * xik * xik - 2.0 * xik * ge[i * h + k];
                }
                for j in 0..m {
                    let ejk = te.data[j * h + k];
                    acc += col_sums[j] * ejk * ejk;
                }
                *b += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_of(t: &Tensor) -> Vec<f64> {
        t.data().to_vec()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![2.0, -3.0])).unwrap();
        let sq = tape.square(a).unwrap();
        assert_eq!(vec_of(tape.value(sq)), [4.0, 9.0]);

        let z = tape.constant(Tensor::row(vec![0.0])).unwrap();
        let e = tape.exp(z).unwrap();
        assert_eq!(vec_of(tape.value(e)), [1.0]);

        let m = tape
            .constant(Tensor::from_rows(&[[1.5, -2.0], [0.25, 8.0]]).unwrap())
            .unwrap();
        let h1 = tape.scale(m, 0.5).unwrap();
        let h2 = tape.scale(m, 0.5).unwrap();
        let back = tape.add(h1, h2).unwrap();
        assert_eq!(tape.value(back), tape.value(m));
    }

    #[test]
    fn scalar_broadcast_on_either_side() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        let s = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let p = tape.mul(s, a).unwrap();
        assert_eq!(vec_of(tape.value(p)), [2.0, 4.0, 6.0]);
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(vec_of(g.get(s).unwrap()), [6.0]);
        assert_eq!(vec_of(g.get(a).unwrap()), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn mismatched_elementwise_shapes_fail() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape
            .constant(Tensor::from_rows(&[[1000.0, 0.0]]).unwrap())
            .unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-15 && out[1] < 1e-300);

        let x = tape
            .constant(Tensor::from_rows(&[[2f64.ln(), 0.0]]).unwrap())
            .unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reduction_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        let m = tape.mean(v).unwrap();
        assert_eq!(tape.value(m).item(), 2.0);

        let i3 = tape.constant(Tensor::eye(3)).unwrap();
        let r = tape.sum_rows(i3).unwrap();
        assert_eq!(vec_of(tape.value(r)), [1.0, 1.0, 1.0]);

        let z = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
        let m = tape.mean(z).unwrap();
        assert_eq!(tape.value(m).item(), 0.0);
    }

    #[test]
    fn empty_reductions_are_domain_errors() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[3, 0])).unwrap();
        assert!(matches!(tape.mean(e), Err(Error::Domain(_))));
        assert!(matches!(tape.sum_rows(e), Err(Error::Domain(_))));
        assert!(matches!(tape.mean_rows(e), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape
            .leaf(Tensor::from_rows(&[[0.3, -1.2], [4.0, 0.0]]).unwrap())
            .unwrap();
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_w() {
        let mut tape = Tape::new();
        let wt = Tensor::from_rows(&[[0.3, -1.2], [4.0, 0.0]]).unwrap();
        let w = tape.leaf(wt.clone()).unwrap();
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &wt.map(|x| 2.0 * x));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2, 2])).unwrap();
        let w = tape.leaf(Tensor::ones(&[2, 2])).unwrap();
        let p = tape.matmul(c, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(w).is_some());
    }

    #[test]
    fn nan_is_caught_at_the_producing_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![-1.0])).unwrap();
        let err = tape.sqrt(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref op } if op == "sqrt"));

        let mut tape = Tape::unchecked();
        let x = tape.constant(Tensor::row(vec![-1.0])).unwrap();
        let y = tape.sqrt(x).unwrap();
        assert!(tape.value(y).data()[0].is_nan());
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::new();
        let logits = tape
            .leaf(Tensor::from_rows(&[[2f64.ln(), 0.0], [0.0, 0.0]]).unwrap())
            .unwrap();
        let loss = tape
            .softmax_cross_entropy(logits, &[(0, 0), (1, 1)])
            .unwrap();
        let expected = (-(2.0f64 / 3.0).ln() - 0.5f64.ln()) / 2.0;
        assert!((tape.value(loss).item() - expected).abs() < 1e-15);
        assert!(tape.softmax_cross_entropy(logits, &[]).is_err());
    }
}
