//! Reverse-mode differentiation over whole tensors.
//!
//! Every op pushes one node holding its output value and a record of how it
//! was produced. Nodes are appended in evaluation order, so the node list is
//! already topologically sorted and [`Tape::backward`] walks it once in
//! reverse.

use std::fmt;

use super::special;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// An op with a hand-written backward rule, defined outside this module.
///
/// `backward` receives the input values, the output value, and the upstream
/// gradient, and returns one optional gradient per input (same length as
/// that input's data).
pub trait FusedOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    SiluDeriv,
    SiluStandard,
    Erf,
    Softplus,
    Exp,
    Ln,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::SiluDeriv => "silu_deriv",
            Unary::SiluStandard => "silu_standard",
            Unary::Erf => "erf",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => special::sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::SiluDeriv => special::silu_deriv(x),
            Unary::SiluStandard => special::silu_standard(x),
            Unary::Erf => special::erf(x),
            Unary::Softplus => special::softplus(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::SiluDeriv => special::silu_deriv_grad(x),
            Unary::SiluStandard => special::silu_standard_grad(x),
            Unary::Erf => special::erf_grad(x),
            Unary::Softplus => special::sigmoid(x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
        }
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Softmax(Var),
    LogSumExp(Var, usize),
    Sum(Var),
    NormalizeRows(Var, f64),
    NormalizeCols(Var, Vec<bool>, f64),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>, Option<usize>),
    Repeat(Var, usize),
    Fused(Vec<Var>, Box<dyn FusedOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Unary(_, u) => u.name(),
            Op::Softmax(..) => "softmax_lastdim",
            Op::LogSumExp(..) => "logsumexp",
            Op::Sum(..) => "sum",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::NormalizeCols(..) => "normalize_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Row(..) => "row",
            Op::StackRows(..) => "stack_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Repeat(..) => "repeat",
            Op::Fused(_, f) => f.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Single-threaded recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn check_finite(op: &'static str, node: usize, data: &[f64]) -> Result<()> {
    // −∞ is a legitimate log-zero (masked mass); NaN and +∞ are not.
    if data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite { op, node });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        check_finite(op.name(), id, value.data())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(id))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the node; zeros if unreached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows() {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = as_matrix(av);
        let n = bv.cols();
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(Error::dim("transpose", av.shape(), &[]));
        }
        let (m, n) = as_matrix(av);
        let out = transpose_raw(av.data(), m, n);
        let rg = self.rg(a);
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(name, av.shape(), bv.shape()));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let n = xv.cols();
        if vv.numel() != n || vv.rows() != 1 {
            return Err(Error::dim(name, xv.shape(), vv.shape()));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(vv.data()).map(|(a, b)| f(*a, *b)).collect::<Vec<_>>())
            .collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(v);
        self.push(Tensor::new(shape, out)?, op, rg)
    }

    /// `x[i, j] + v[j]` (trailing-axis broadcast).
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, v, |a, b| a + b, Op::AddRow(x, v))
    }

    /// `x[i, j] · v[j]` (trailing-axis broadcast).
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, v, |a, b| a * b, Op::MulRow(x, v))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Scale(x, c), rg)
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|v| v + c).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Offset(x), rg)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.offset(neg, 1.0)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|v| f.eval(*v)).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Unary(x, f), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn silu_deriv(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::SiluDeriv)
    }

    pub fn silu_standard(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::SiluStandard)
    }

    pub fn erf(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Erf)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    /// Row-wise softmax over the last axis. Masked entries (`false`) get
    /// weight exactly 0; a row with no unmasked entry is an error.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = as_matrix(xv);
        if let Some(mask) = mask {
            if mask.len() != xv.numel() {
                return Err(Error::dim("softmax_lastdim", xv.shape(), &[mask.len()]));
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let mx = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow {
                    op: "softmax_lastdim",
                    row: i,
                });
            }
            let mut z = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= z);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg)
    }

    /// Max-shifted log-sum-exp along `axis` (0 reduces rows, 1 reduces
    /// columns of a matrix; a vector only has axis 0). −∞ entries add no mass.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = logsumexp_axis(xv, axis)?;
        let rg = self.rg(x);
        self.push(out, Op::LogSumExp(x, axis), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of several same-shape nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Per-row standardisation `(x − mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = as_matrix(xv);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let (mu, inv) = moments(row.iter().copied(), eps);
            for j in 0..n {
                out[i * n + j] = (row[j] - mu) * inv;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::NormalizeRows(x, eps), rg)
    }

    /// Per-column standardisation using only the rows where `rows_mask` is
    /// true. Excluded rows produce zeros.
    pub fn normalize_cols(&mut self, x: Var, rows_mask: &[bool], eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = as_matrix(xv);
        if rows_mask.len() != m {
            return Err(Error::dim("normalize_cols", xv.shape(), &[rows_mask.len()]));
        }
        if !rows_mask.iter().any(|&b| b) {
            return Err(Error::DegenerateRow {
                op: "normalize_cols",
                row: 0,
            });
        }
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            let col = (0..m).filter(|&i| rows_mask[i]).map(|i| xv.data()[i * n + j]);
            let (mu, inv) = moments(col, eps);
            for i in (0..m).filter(|&i| rows_mask[i]) {
                out[i * n + j] = (xv.data()[i * n + j] - mu) * inv;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out)?,
            Op::NormalizeCols(x, rows_mask.to_vec(), eps),
            rg,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::dim("concat_cols", av.shape(), bv.shape()));
        }
        let (m, na) = as_matrix(av);
        let nb = bv.cols();
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, na + nb], out)?, Op::ConcatCols(a, b), rg)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = as_matrix(xv);
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", xv.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&xv.row(i)[start..end]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![m, end - start], out)?,
            Op::SliceCols(x, start, end),
            rg,
        )
    }

    /// Row `i` of a matrix as a `1 × n` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if i >= xv.rows() {
            return Err(Error::dim("row", xv.shape(), &[i]));
        }
        let n = xv.cols();
        let out = xv.row(i).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![1, n], out)?, Op::Row(x, i), rg)
    }

    /// Stack `1 × n` (or length-n) nodes into an `m × n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let n = rows
            .first()
            .map(|&r| self.value(r).numel())
            .ok_or_else(|| Error::Contract("stack_rows of nothing".into()))?;
        let mut out = Vec::with_capacity(rows.len() * n);
        let mut rg = false;
        for &r in rows {
            let rv = self.value(r);
            if rv.numel() != n {
                return Err(Error::dim("stack_rows", &[n], rv.shape()));
            }
            out.extend_from_slice(rv.data());
            rg |= self.rg(r);
        }
        self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::StackRows(rows.to_vec()),
            rg,
        )
    }

    /// Row lookup `table[ids[t]]`. Rows equal to `frozen` never receive a
    /// gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], frozen: Option<usize>) -> Result<Var> {
        let tv = self.value(table);
        let (v, n) = as_matrix(tv);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::dim("gather_rows", tv.shape(), &[id]));
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![ids.len(), n], out)?,
            Op::GatherRows(table, ids.to_vec(), frozen),
            rg,
        )
    }

    /// Repeat each entry of a vector `k` times: `[a, b] → [a, a, b, b]`.
    pub fn repeat_each(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<f64> = xv
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, k))
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::Repeat(x, k), rg)
    }

    /// Record an op whose value was computed by the caller.
    pub fn fused(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn FusedOp>) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Fused(inputs.to_vec(), op), rg)
    }

    /// Accumulate `∂loss/∂node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            accumulate(&mut self.nodes[id].grad, &g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, delta: Vec<f64>| {
            if wants(v) {
                accumulate(&mut grads[v.0], &delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = as_matrix(av);
                let n = bv.cols();
                if wants(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if wants(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = as_matrix(val(*a));
                send(*a, transpose_raw(g, n, m));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    send(*a, g.iter().zip(bv.data()).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(av.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(x, v) => {
                let n = val(*v).numel();
                send(*x, g.to_vec());
                if wants(*v) {
                    let mut dv = vec![0.0; n];
                    for row in g.chunks(n) {
                        dv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    send(*v, dv);
                }
            }
            Op::MulRow(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let n = vv.numel();
                if wants(*x) {
                    let dx = g
                        .chunks(n)
                        .flat_map(|row| row.iter().zip(vv.data()).map(|(a, b)| a * b).collect::<Vec<_>>())
                        .collect();
                    send(*x, dx);
                }
                if wants(*v) {
                    let mut dv = vec![0.0; n];
                    for (grow, xrow) in g.chunks(n).zip(xv.data().chunks(n)) {
                        for j in 0..n {
                            dv[j] += grow[j] * xrow[j];
                        }
                    }
                    send(*v, dv);
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::Offset(x) => send(*x, g.to_vec()),
            Op::Unary(x, f) => {
                let xv = val(*x);
                let dx = g
                    .iter()
                    .zip(xv.data())
                    .zip(out.data())
                    .map(|((g, x), y)| g * f.deriv(*x, *y))
                    .collect();
                send(*x, dx);
            }
            Op::Softmax(x) => {
                let (m, n) = as_matrix(out);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let y = &out.data()[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LogSumExp(x, axis) => {
                let xv = val(*x);
                let (m, n) = as_matrix(xv);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let r = if xv.is_matrix() && *axis == 1 { i } else { j };
                        let e = xv.data()[i * n + j];
                        if e != f64::NEG_INFINITY {
                            dx[i * n + j] = g[r] * (e - out.data()[r]).exp();
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).numel()]),
            Op::NormalizeRows(x, eps) => {
                let xv = val(*x);
                let (m, n) = as_matrix(xv);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let idx: Vec<usize> = (i * n..(i + 1) * n).collect();
                    normalize_backward(xv.data(), out.data(), g, &idx, *eps, &mut dx);
                }
                send(*x, dx);
            }
            Op::NormalizeCols(x, mask, eps) => {
                let xv = val(*x);
                let (m, n) = as_matrix(xv);
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    let idx: Vec<usize> = (0..m).filter(|&i| mask[i]).map(|i| i * n + j).collect();
                    normalize_backward(xv.data(), out.data(), g, &idx, *eps, &mut dx);
                }
                send(*x, dx);
            }
            Op::ConcatCols(a, b) => {
                let na = val(*a).cols();
                let nb = val(*b).cols();
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for row in g.chunks(na + nb) {
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::SliceCols(x, start, end) => {
                let (m, n) = as_matrix(val(*x));
                let w = end - start;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(*x, dx);
            }
            Op::Row(x, i) => {
                let (m, n) = as_matrix(val(*x));
                let mut dx = vec![0.0; m * n];
                dx[i * n..(i + 1) * n].copy_from_slice(g);
                send(*x, dx);
            }
            Op::StackRows(rows) => {
                let n = out.cols();
                for (i, &r) in rows.iter().enumerate() {
                    send(r, g[i * n..(i + 1) * n].to_vec());
                }
            }
            Op::GatherRows(table, ids, frozen) => {
                let (v, n) = as_matrix(val(*table));
                let mut dt = vec![0.0; v * n];
                for (t, &id) in ids.iter().enumerate() {
                    if Some(id) == *frozen {
                        continue;
                    }
                    for j in 0..n {
                        dt[id * n + j] += g[t * n + j];
                    }
                }
                send(*table, dt);
            }
            Op::Repeat(x, k) => {
                let dx = g.chunks(*k).map(|c| c.iter().sum()).collect();
                send(*x, dx);
            }
            Op::Fused(inputs, f) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let deltas = f.backward(&ins, out, g);
                for (&v, d) in inputs.iter().zip(deltas) {
                    if let Some(d) = d {
                        check_finite(f.name(), v.0, &d)?;
                        send(v, d);
                    }
                }
            }
        }
        Ok(())
    }
}

fn moments(values: impl Iterator<Item = f64> + Clone, eps: f64) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mu = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

/// Backward of standardisation over the positions `idx`.
fn normalize_backward(x: &[f64], y: &[f64], g: &[f64], idx: &[usize], eps: f64, dx: &mut [f64]) {
    let (_, inv) = moments(idx.iter().map(|&i| x[i]), eps);
    let n = idx.len() as f64;
    let mean_g = idx.iter().map(|&i| g[i]).sum::<f64>() / n;
    let mean_gy = idx.iter().map(|&i| g[i] * y[i]).sum::<f64>() / n;
    for &i in idx {
        dx[i] = inv * (g[i] - mean_g - y[i] * mean_gy);
    }
}

/// Plain log-sum-exp on a slice; −∞ entries carry no mass and an all −∞
/// slice yields −∞.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + xs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn logsumexp_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.is_matrix() {
        if axis != 0 {
            return Err(Error::dim("logsumexp", x.shape(), &[axis]));
        }
        return Ok(Tensor::scalar(logsumexp_slice(x.data())));
    }
    let (m, n) = as_matrix(x);
    match axis {
        0 => {
            let out = (0..n)
                .map(|j| {
                    let col: Vec<f64> = (0..m).map(|i| x.at(i, j)).collect();
                    logsumexp_slice(&col)
                })
                .collect();
            Ok(Tensor::vector(out))
        }
        1 => Ok(Tensor::vector((0..m).map(|i| logsumexp_slice(x.row(i))).collect())),
        _ => Err(Error::dim("logsumexp", x.shape(), &[axis])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2)).unwrap();
        let a = tape.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let p = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let proj = tape.constant(m(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let b = tape.constant(m(2, 2, &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let q = tape.matmul(proj, b).unwrap();
        assert_eq!(tape.value(q).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.5])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.5])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn repeated_backward_accumulates_and_reset_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -0.1])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let first = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap().to_vec();
        for (a, b) in first.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), first.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_fails_fast_with_op_name() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0])).unwrap();
        let err = tape.unary(x, Unary::Ln).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "ln", node: 1 }));
    }

    #[test]
    fn softmax_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(m(1, 3, &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax_lastdim(x, None).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mask = [true, false, true];
        let y = tape.softmax_lastdim(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5]);
        let none = [false, false, false];
        assert!(matches!(
            tape.softmax_lastdim(x, Some(&none)),
            Err(Error::DegenerateRow { row: 0, .. })
        ));
    }

    #[test]
    fn logsumexp_basics() {
        assert!((logsumexp_slice(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp_slice(&[-3.25]), -3.25);
        assert_eq!(logsumexp_slice(&[f64::NEG_INFINITY, 1.5]), 1.5);
        assert_eq!(logsumexp_slice(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn gather_rows_freezes_padding_row() {
        let mut tape = Tape::new();
        let table = tape.param(m(3, 2, &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0])).unwrap();
        let e = tape.gather_rows(table, &[2, 0, 2, 1], Some(0)).unwrap();
        assert_eq!(tape.value(e).row(0), tape.value(e).row(2));
        let s = tape.sum(e).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
