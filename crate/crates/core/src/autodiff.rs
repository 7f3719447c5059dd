//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Inputs always precede outputs, so [`Tape::backward`] is a single
//! reverse sweep. Backward rules are written out per [`Op`] variant rather
//! than stored as closures, which keeps them easy to audit.
//!
//! Conventions:
//! - binary ops need equal shapes, or one side holding a single value;
//! - ReLU and `abs` use subgradient 0 at their kink;
//! - any operation that would store a non-finite value fails with
//!   [`Error::NonFinite`] instead.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, EigBackwardConfig, SymEig};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Abs,
    Relu,
    Sigmoid,
    /// `ln(1 + eˣ)`, evaluated without overflow.
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// `r×c → [r]`: sum of each row's entries.
    SumRows,
    /// `r×c → 1×c`: average of the rows.
    MeanRows,
    /// any shape `→ [1]`.
    SumAll,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Concat(Var, Var),
    Reduce(Reduction, Var),
    Dropout(Var, Vec<f64>),
    Reshape(Var),
    Transpose(Var),
    SwapLeadingAxes(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SqrtOperator(Var, Box<SymEig>, EigBackwardConfig),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let grad = requires_grad.then(|| Tensor::zeros(value.shape().to_vec()));
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
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

    /// Accumulated gradient; `None` for tensors that do not require one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let grad = requires_grad.then(|| Tensor::zeros(value.shape().to_vec()));
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(
                op,
                format!("expected a matrix, got {other:?}"),
            )),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(
            "matmul",
            Tensor::new([m, n], out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        };
        let numel: usize = shape.iter().product();
        let at = |t: &Tensor, i: usize| {
            if t.numel() == 1 {
                t.data()[0]
            } else {
                t.data()[i]
            }
        };
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data = (0..numel).map(|i| f(at(ta, i), at(tb, i))).collect();
        self.push(
            "elementwise",
            Tensor::new(shape, data)?,
            Op::Binary(op, a, b),
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| match op {
            UnaryOp::Abs => x.abs(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Softplus => softplus(x),
        });
        self.push("elementwise", value, Op::Unary(op, a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    /// Column-wise concatenation of two matrices with the same row count.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.matrix_dims(a, "concat")?;
        let (n2, q) = self.matrix_dims(b, "concat")?;
        if n != n2 {
            return Err(Error::shape("concat", format!("{n} rows vs {n2} rows")));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&ta[i * p..(i + 1) * p]);
            out.extend_from_slice(&tb[i * q..(i + 1) * q]);
        }
        self.push(
            "concat",
            Tensor::new([n, p + q], out)?,
            Op::Concat(a, b),
            &[a, b],
        )
    }

    pub fn reduce(&mut self, op: Reduction, a: Var) -> Result<Var> {
        let value = match op {
            Reduction::SumAll => Tensor::scalar(self.value(a).data().iter().sum()),
            Reduction::SumRows => {
                let (r, c) = self.matrix_dims(a, "sum_rows")?;
                let t = self.value(a).data();
                Tensor::vector((0..r).map(|i| t[i * c..(i + 1) * c].iter().sum()).collect())
            }
            Reduction::MeanRows => {
                let (r, c) = self.matrix_dims(a, "mean_rows")?;
                if r == 0 {
                    return Err(Error::shape("mean_rows", "no rows"));
                }
                let t = self.value(a).data();
                let mut col = Vec::with_capacity(r);
                let means = (0..c)
                    .map(|j| {
                        col.clear();
                        col.extend((0..r).map(|i| t[i * c + j]));
                        order_independent_sum(&mut col) / r as f64
                    })
                    .collect();
                Tensor::new([1, c], means)?
            }
        };
        self.push("reduce", value, Op::Reduce(op, a), &[a])
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::SumRows, a)
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::MeanRows, a)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::SumAll, a)
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout(a, mask), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    /// `[p, q, r] → [q, p, r]`.
    pub fn swap_leading_axes(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (p, q, r) = match t.shape() {
            [p, q, r] => (*p, *q, *r),
            other => {
                return Err(Error::shape(
                    "swap_leading_axes",
                    format!("expected rank 3, got {other:?}"),
                ))
            }
        };
        let value = Tensor::new([q, p, r], swap_leading(t.data(), p, q, r))?;
        self.push("swap_leading_axes", value, Op::SwapLeadingAxes(a), &[a])
    }

    /// `out[k] = a[index[k]]`, treating `a` as a matrix of rows.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if let Some(bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new([index.len(), c], out)?;
        self.push("gather_rows", value, Op::GatherRows(a, index), &[a])
    }

    /// `out[index[k]] += a[k]` into `rows` output rows.
    ///
    /// Each output entry is summed in value order, so the result does not
    /// depend on the order of the source rows. Node relabeling therefore
    /// permutes the output exactly.
    pub fn scatter_add_rows(&mut self, a: Var, index: Vec<usize>, rows: usize) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if index.len() != t.rows() {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {} rows", index.len(), t.rows()),
            ));
        }
        let mut sources: Vec<Vec<usize>> = vec![Vec::new(); rows];
        for (k, &dst) in index.iter().enumerate() {
            if dst >= rows {
                return Err(Error::shape(
                    "scatter_add_rows",
                    format!("row {dst} out of range for {rows} rows"),
                ));
            }
            sources[dst].push(k);
        }
        let mut out = vec![0.0; rows * c];
        let mut buf = Vec::new();
        for (dst, src) in sources.iter().enumerate() {
            for j in 0..c {
                buf.clear();
                buf.extend(src.iter().map(|&k| t.data()[k * c + j]));
                out[dst * c + j] = order_independent_sum(&mut buf);
            }
        }
        let value = Tensor::new([rows, c], out)?;
        self.push(
            "scatter_add_rows",
            value,
            Op::ScatterAddRows(a, index),
            &[a],
        )
    }

    /// Square-root operator `S = diag(√Λ₊)·Oᵀ` of a symmetric matrix, with
    /// `SᵀS` equal to the matrix with its negative eigenvalues clamped to zero.
    /// Rows are oriented with [`SymEig::oriented_by_mass`].
    pub fn sqrt_operator(&mut self, a: Var, cfg: EigBackwardConfig) -> Result<Var> {
        let eig = linalg::sym_eig(self.value(a))?.oriented_by_mass();
        let value = linalg::sqrt_operator(&eig);
        self.push(
            "sqrt_operator",
            value,
            Op::SqrtOperator(a, Box::new(eig), cfg),
            &[a],
        )
    }

    /// Eigendecomposition recorded by a [`Tape::sqrt_operator`] node.
    pub fn eigensystem(&self, v: Var) -> Option<&SymEig> {
        match &self.nodes[v.0].op {
            Op::SqrtOperator(_, eig, _) => Some(eig),
            _ => None,
        }
    }

    /// Smallest nonzero `|x|` fed into any ReLU or `abs` on the tape
    /// (infinity if none).
    ///
    /// Exact zeros are skipped: they come from structurally equal operands,
    /// such as the diagonal of a pairwise difference, and stay zero under
    /// perturbation. Finite-difference checks are only meaningful when the
    /// margin exceeds the step.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|node| match node.op {
                Op::Unary(UnaryOp::Relu | UnaryOp::Abs, a) => Some(self.value(a)),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .filter(|&v| v > 0.0)
            .fold(f64::INFINITY, f64::min)
    }

    /// Every eigendecomposition recorded by a [`Tape::sqrt_operator`] node.
    pub fn eigensystems(&self) -> impl Iterator<Item = &SymEig> {
        self.nodes.iter().filter_map(|node| match &node.op {
            Op::SqrtOperator(_, eig, _) => Some(eig.as_ref()),
            _ => None,
        })
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adjoint: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(Tensor::ones(shape));

        for id in (0..=loss.0).rev() {
            let Some(g) = adjoint[id].take() else {
                continue;
            };
            for (input, contribution) in self.local_gradients(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adjoint[input.0] {
                    Some(acc) => add_assign(acc, &contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            let node = &mut self.nodes[id];
            if let Some(acc) = node.grad.as_mut() {
                add_assign(acc, &g);
            }
            if !node.grad.as_ref().is_none_or(Tensor::all_finite) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn local_gradients(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    // g·bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g.data()[i * n + j] * tb.data()[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    out.push((*a, Tensor::new([m, k], da)?));
                }
                if self.wants(*b) {
                    // aᵀ·g
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g.data()[i * n + j];
                            }
                        }
                    }
                    out.push((*b, Tensor::new([k, n], db)?));
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let at = |t: &Tensor, i: usize| {
                    if t.numel() == 1 {
                        t.data()[0]
                    } else {
                        t.data()[i]
                    }
                };
                let n = g.numel();
                let (mut da, mut db) = (vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let (x, y, gi) = (at(ta, i), at(tb, i), g.data()[i]);
                    let (dx, dy) = match op {
                        BinaryOp::Add => (gi, gi),
                        BinaryOp::Sub => (gi, -gi),
                        BinaryOp::Mul => (gi * y, gi * x),
                        BinaryOp::Div => (gi / y, -gi * x / (y * y)),
                    };
                    da[i] = dx;
                    db[i] = dy;
                }
                if self.wants(*a) {
                    out.push((*a, collapse_broadcast(da, ta)?));
                }
                if self.wants(*b) {
                    out.push((*b, collapse_broadcast(db, tb)?));
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let data = (0..g.numel())
                    .map(|i| {
                        let (xi, yi, gi) = (x.data()[i], y.data()[i], g.data()[i]);
                        gi * match op {
                            UnaryOp::Abs => {
                                if xi > 0.0 {
                                    1.0
                                } else if xi < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Sigmoid => yi * (1.0 - yi),
                            UnaryOp::Softplus => sigmoid(xi),
                        }
                    })
                    .collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::Scale(a, factor) => out.push((*a, g.map(|v| v * factor))),
            Op::Concat(a, b) => {
                let (n, p) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let q = self.value(*b).shape()[1];
                let (mut da, mut db) = (Vec::with_capacity(n * p), Vec::with_capacity(n * q));
                for i in 0..n {
                    let row = &g.data()[i * (p + q)..(i + 1) * (p + q)];
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                out.push((*a, Tensor::new([n, p], da)?));
                out.push((*b, Tensor::new([n, q], db)?));
            }
            Op::Reduce(op, a) => {
                let x = self.value(*a);
                let grad = match op {
                    Reduction::SumAll => Tensor::full(x.shape().to_vec(), g.data()[0]),
                    Reduction::SumRows => {
                        let c = x.shape()[1];
                        let data = (0..x.numel()).map(|k| g.data()[k / c]).collect();
                        Tensor::new(x.shape().to_vec(), data)?
                    }
                    Reduction::MeanRows => {
                        let (r, c) = (x.shape()[0], x.shape()[1]);
                        let data = (0..x.numel()).map(|k| g.data()[k % c] / r as f64).collect();
                        Tensor::new(x.shape().to_vec(), data)?
                    }
                };
                out.push((*a, grad));
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
                out.push((*a, Tensor::new(g.shape().to_vec(), data)?));
            }
            Op::Reshape(a) => out.push((*a, g.clone().reshape(self.shape(*a).to_vec())?)),
            Op::Transpose(a) => out.push((*a, g.transpose()?)),
            Op::SwapLeadingAxes(a) => {
                let (q, p, r) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                out.push((*a, Tensor::new([p, q, r], swap_leading(g.data(), q, p, r))?));
            }
            Op::GatherRows(a, index) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut data = vec![0.0; x.numel()];
                for (k, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        data[src * c + j] += g.data()[k * c + j];
                    }
                }
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::ScatterAddRows(a, index) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut data = Vec::with_capacity(x.numel());
                for &dst in index {
                    data.extend_from_slice(&g.data()[dst * c..(dst + 1) * c]);
                }
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::SqrtOperator(a, eig, cfg) => {
                out.push((*a, linalg::sqrt_operator_backward(eig, g, cfg)?));
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sums after sorting, so the result is independent of input order.
pub(crate) fn order_independent_sum(values: &mut [f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        _ => {
            values.sort_by(f64::total_cmp);
            values.iter().sum()
        }
    }
}

fn swap_leading(data: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..p {
        for j in 0..q {
            let src = (i * q + j) * r;
            let dst = (j * p + i) * r;
            out[dst..dst + r].copy_from_slice(&data[src..src + r]);
        }
    }
    out
}

fn collapse_broadcast(grad: Vec<f64>, input: &Tensor) -> Result<Tensor> {
    if input.numel() == 1 && grad.len() != 1 {
        Ok(Tensor::new(
            input.shape().to_vec(),
            vec![grad.iter().sum()],
        )?)
    } else {
        Tensor::new(input.shape().to_vec(), grad)
    }
}

fn add_assign(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2)).unwrap();
        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let p = t.matmul(i, a).unwrap();
        assert_eq!(t.value(p), t.value(a));

        let proj = t.constant(m(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
        let v = t.constant(m(&[&[5.0], &[7.0]])).unwrap();
        let r = t.matmul(proj, v).unwrap();
        assert_eq!(t.value(r).data(), &[5.0, 0.0]);

        let bad = t.constant(Tensor::zeros([3, 1])).unwrap();
        assert!(matches!(t.matmul(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::vector(vec![0.0])).unwrap();
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).data(), &[0.5]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-3.0, 5.0])).unwrap();
        let a = t.abs(x).unwrap();
        let l = t.sum_all(a).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[-1.0, 1.0]);

        let y = t.constant(Tensor::zeros([3])).unwrap();
        assert!(t.add(x, y).is_err());
    }

    #[test]
    fn scalar_broadcast_backward_sums() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let b = t.param(Tensor::scalar(0.5)).unwrap();
        let y = t.mul(x, b).unwrap();
        let l = t.sum_all(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[6.0]);
        assert_eq!(t.grad(x).unwrap().data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0], &[2.0]])).unwrap();
        let b = t.constant(m(&[&[3.0], &[4.0]])).unwrap();
        let c = t.concat(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 3.0, 2.0, 4.0]);
        let empty = t.constant(Tensor::zeros([2, 0])).unwrap();
        let same = t.concat(a, empty).unwrap();
        assert_eq!(t.value(same), t.value(a));
        let three = t.constant(Tensor::zeros([3, 1])).unwrap();
        assert!(t.concat(a, three).is_err());
    }

    #[test]
    fn reduce_examples() {
        let mut t = Tape::new();
        let a = t.param(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let s = t.sum_rows(a).unwrap();
        assert_eq!(t.value(s).data(), &[3.0, 7.0]);
        let one = t.constant(m(&[&[5.0, -1.0]])).unwrap();
        let mean = t.mean_rows(one).unwrap();
        assert_eq!(t.value(mean), t.value(one));
        let total = t.sum_all(a).unwrap();
        t.backward(total).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[1.0; 4]);
        let v = t.constant(Tensor::vector(vec![1.0])).unwrap();
        assert!(t.sum_rows(v).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.param(Tensor::ones([100])).unwrap();
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.15, false, &mut rng).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(t.dropout(x, -0.1, true, &mut rng).is_err());

        let big = t.param(Tensor::ones([10_000])).unwrap();
        let d = t.dropout(big, 0.5, true, &mut rng).unwrap();
        let zeros = t.value(d).data().iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((zeros - 0.5).abs() < 0.05, "zero fraction {zeros}");
        assert!(t.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let w = t.param(m(&[&[-1.0, 1.0], &[2.0, -2.0]])).unwrap();
        let r = t.relu(w).unwrap();
        let l = t.sum_all(r).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);

        // Accumulates without zero_grad, resets with it.
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[0.0, 2.0, 2.0, 0.0]);
        t.zero_grad();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);

        assert!(matches!(t.backward(w), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        assert!(t.constant(Tensor::vector(vec![f64::NAN])).is_err());
        let a = t.constant(Tensor::vector(vec![1.0])).unwrap();
        let z = t.constant(Tensor::vector(vec![0.0])).unwrap();
        assert!(matches!(t.div(a, z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn swap_and_scatter() {
        let mut t = Tape::new();
        let x = t
            .param(Tensor::new([2, 3, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap())
            .unwrap();
        let s = t.swap_leading_axes(x).unwrap();
        assert_eq!(t.shape(s), &[3, 2, 1]);
        assert_eq!(t.value(s).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);

        let v = t.param(m(&[&[1.0], &[2.0], &[3.0]])).unwrap();
        let sc = t.scatter_add_rows(v, vec![1, 1, 0], 2).unwrap();
        assert_eq!(t.value(sc).data(), &[3.0, 3.0]);
        assert!(t.scatter_add_rows(v, vec![0, 2, 0], 2).is_err());
        let g = t.gather_rows(v, vec![2, 2, 0]).unwrap();
        assert_eq!(t.value(g).data(), &[3.0, 3.0, 1.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(-20.0) - 2.061_153_620_314_381e-9).abs() < 1e-22);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
