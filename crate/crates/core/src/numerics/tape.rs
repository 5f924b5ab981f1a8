//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive in execution order. Values are
//! immutable once recorded, so a node only ever reads nodes with smaller
//! ids and a single reverse sweep accumulates all gradients.
//!
//! Binary operations broadcast their right operand when it is `1 × c`
//! (row), `r × 1` (column) or `1 × 1` (scalar).
//!
//! Matrix products and sparse propagations charge their multiply-adds to
//! the tape's current [`FlopSite`], which is how the FLOPs accountant gets
//! instrumented counts from a real forward pass.

use std::rc::Rc;
use std::sync::Arc;

use super::special::{masked_softmax_row, phi, phi_density, sigmoid, softplus_raw};
use super::{Csr, Matrix, ParamStore};
use crate::error::{Error, Result};
use crate::flops::{FlopKind, LayerFlops};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Softplus,
    NormalCdf,
    Square,
}

/// Where the multiply-adds of subsequent ops are charged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopSite {
    pub layer: usize,
    pub kind: FlopKind,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    AddScalar(Var),
    SumAll(Var),
    ColumnSums(Var),
    Sparse(Arc<Csr>, Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterRows(Var, Rc<[usize]>),
    TakePerRow(Var, Rc<[usize]>),
    MaskedSoftmax(Var, Rc<[bool]>),
    BceWithLogits(Var, Rc<Matrix>, Rc<[bool]>),
    SoftmaxCrossEntropy(Var, Rc<[Option<usize>]>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    site: Option<FlopSite>,
    flops: Vec<LayerFlops>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            site: None,
            flops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m.data()[0]
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers every parameter of `store` as a trainable leaf, in order.
    pub fn load_params(&mut self, store: &ParamStore) -> Vec<Var> {
        store.values().iter().map(|m| self.param(m.clone())).collect()
    }

    pub fn set_flop_site(&mut self, site: Option<FlopSite>) {
        self.site = site;
    }

    pub fn flop_site(&self) -> Option<FlopSite> {
        self.site
    }

    /// Instrumented counts per layer index.
    pub fn layer_flops(&self) -> &[LayerFlops] {
        &self.flops
    }

    fn charge(&mut self, flops: u64) {
        if let Some(site) = self.site {
            if self.flops.len() <= site.layer {
                self.flops.resize(site.layer + 1, LayerFlops::default());
            }
            let entry = &mut self.flops[site.layer];
            match site.kind {
                FlopKind::Transform => entry.transform += flops,
                FlopKind::Propagation => entry.propagation += flops,
                FlopKind::Gate => entry.gate += flops,
            }
        }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.cols(),
            vb.rows(),
            "matmul shape mismatch {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let flops = 2 * (va.rows() * va.cols() * vb.cols()) as u64;
        let out = va.matmul_unchecked(vb);
        self.charge(flops);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = va.shape();
        let bshape = vb.shape();
        assert!(
            bshape == (r, c) || bshape == (1, c) || bshape == (r, 1) || bshape == (1, 1),
            "cannot broadcast {:?} onto {:?}",
            bshape,
            (r, c)
        );
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
            BinaryOp::Div => |x: f64, y: f64| x / y,
        };
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(va.data()[i * c + j], broadcast_get(vb, i, j)));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Matrix::from_raw(r, c, out), Op::Binary(op, a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnaryOp::Softplus => softplus_raw,
            UnaryOp::NormalCdf => phi,
            UnaryOp::Square => |x| x * x,
        };
        let out = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(out, Op::Unary(op, a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn normal_cdf(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::NormalCdf, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean of an empty matrix");
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums, `r × c → 1 × c`.
    pub fn column_sums(&mut self, a: Var) -> Var {
        let out = self.value(a).column_sums();
        let ng = self.needs(a);
        self.push(out, Op::ColumnSums(a), ng)
    }

    /// `operator · a` for a constant sparse operator.
    pub fn sparse_matmul(&mut self, operator: Arc<Csr>, a: Var) -> Var {
        let va = self.value(a);
        let flops = 2 * (operator.nnz() * va.cols()) as u64;
        let out = operator.matmul_dense(va);
        self.charge(flops);
        let ng = self.needs(a);
        self.push(out, Op::Sparse(operator, a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Rc<[usize]>) -> Var {
        let out = self.value(a).gather_rows(&rows);
        let ng = self.needs(a);
        self.push(out, Op::GatherRows(a, rows), ng)
    }

    /// Places row `i` of `a` at row `rows[i]` of a zero matrix with
    /// `total_rows` rows; repeated targets accumulate.
    pub fn scatter_rows(&mut self, a: Var, rows: Rc<[usize]>, total_rows: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), rows.len(), "scatter_rows index length mismatch");
        let mut out = Matrix::zeros(total_rows, va.cols());
        for (src, &dst) in rows.iter().enumerate() {
            for (o, v) in out.row_mut(dst).iter_mut().zip(va.row(src)) {
                *o += v;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::ScatterRows(a, rows), ng)
    }

    /// `out[i][j] = a[i][index[i * width + j]]` with `width = index.len() / rows`.
    pub fn take_per_row(&mut self, a: Var, index: Rc<[usize]>) -> Var {
        let va = self.value(a);
        let rows = va.rows();
        assert!(rows > 0 && index.len() % rows == 0, "take_per_row index length");
        let width = index.len() / rows;
        let mut out = Vec::with_capacity(index.len());
        for i in 0..rows {
            for j in 0..width {
                out.push(va.row(i)[index[i * width + j]]);
            }
        }
        let ng = self.needs(a);
        self.push(Matrix::from_raw(rows, width, out), Op::TakePerRow(a, index), ng)
    }

    /// Row-wise softmax over the positions where `mask` is true; other
    /// positions are exactly zero. Every row needs at least one true entry.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<[bool]>) -> Var {
        let va = self.value(a);
        let (r, c) = va.shape();
        assert_eq!(mask.len(), r * c, "mask length mismatch");
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let m = &mask[i * c..(i + 1) * c];
            assert!(m.iter().any(|&x| x), "row {i} has an empty selection");
            out.extend(masked_softmax_row(va.row(i), m));
        }
        let ng = self.needs(a);
        self.push(Matrix::from_raw(r, c, out), Op::MaskedSoftmax(a, mask), ng)
    }

    /// Mean sigmoid cross-entropy over entries where `mask` is true.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Matrix>, mask: Rc<[bool]>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), targets.shape(), "bce target shape mismatch");
        assert_eq!(mask.len(), vl.len(), "bce mask length mismatch");
        let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let mut total = 0.0;
        for ((&x, &y), &m) in vl.data().iter().zip(targets.data()).zip(mask.iter()) {
            if m {
                // max(x,0) - x*y + ln(1 + e^{-|x|})
                total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            }
        }
        let ng = self.needs(logits);
        self.push(
            Matrix::scalar(total / count),
            Op::BceWithLogits(logits, targets, mask),
            ng,
        )
    }

    /// Mean softmax cross-entropy over rows with a label.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Rc<[Option<usize>]>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), labels.len(), "label count mismatch");
        let count = labels.iter().flatten().count().max(1) as f64;
        let mut total = 0.0;
        for (row, label) in vl.iter_rows().zip(labels.iter()) {
            if let Some(y) = *label {
                assert!(y < row.len(), "label {y} out of range");
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
        }
        let ng = self.needs(logits);
        self.push(
            Matrix::scalar(total / count),
            Op::SoftmaxCrossEntropy(logits, labels),
            ng,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: shape,
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, g.matmul_t(vb));
                }
                if self.needs(*b) {
                    acc(*b, va.tmatmul(g));
                }
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, c) = va.shape();
                let mut ga = Vec::with_capacity(r * c);
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                for i in 0..r {
                    for j in 0..c {
                        let gij = g.data()[i * c + j];
                        let x = va.data()[i * c + j];
                        let y = broadcast_get(vb, i, j);
                        let (dx, dy) = match op {
                            BinaryOp::Add => (gij, gij),
                            BinaryOp::Sub => (gij, -gij),
                            BinaryOp::Mul => (gij * y, gij * x),
                            BinaryOp::Div => (gij / y, -gij * x / (y * y)),
                        };
                        ga.push(dx);
                        let (bi, bj) = (i.min(vb.rows() - 1), j.min(vb.cols() - 1));
                        gb.row_mut(bi)[bj] += dy;
                    }
                }
                acc(*a, Matrix::from_raw(r, c, ga));
                acc(*b, gb);
            }
            Op::Unary(op, a) => {
                let va = self.value(*a);
                let d: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gx)| {
                        gx * match op {
                            UnaryOp::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Softplus => sigmoid(x),
                            UnaryOp::NormalCdf => phi_density(x),
                            UnaryOp::Square => 2.0 * x,
                        }
                    })
                    .collect();
                acc(*a, Matrix::from_raw(va.rows(), va.cols(), d));
            }
            Op::Scale(a, f) => acc(*a, g.scale(*f)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.data()[0]));
            }
            Op::ColumnSums(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).copy_from_slice(g.row(0));
                }
                acc(*a, d);
            }
            Op::Sparse(operator, a) => acc(*a, operator.tmatmul_dense(g)),
            Op::GatherRows(a, rows) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for (src, &dst) in rows.iter().enumerate() {
                    for (o, v) in d.row_mut(dst).iter_mut().zip(g.row(src)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::ScatterRows(a, rows) => acc(*a, g.gather_rows(rows)),
            Op::TakePerRow(a, index) => {
                let (r, c) = self.shape(*a);
                let width = index.len() / r;
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..width {
                        d.row_mut(i)[index[i * width + j]] += g.row(i)[j];
                    }
                }
                acc(*a, d);
            }
            Op::MaskedSoftmax(a, mask) => {
                // dx_j = y_j (g_j - Σ_k y_k g_k); y is zero off the mask.
                let y = &node.value;
                let (r, c) = y.shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let m = &mask[i * c..(i + 1) * c];
                    for j in 0..c {
                        if m[j] {
                            d.row_mut(i)[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                acc(*a, d);
            }
            Op::BceWithLogits(logits, targets, mask) => {
                let vl = self.value(*logits);
                let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
                let scale = g.data()[0] / count;
                let d: Vec<f64> = vl
                    .data()
                    .iter()
                    .zip(targets.data())
                    .zip(mask.iter())
                    .map(|((&x, &t), &m)| if m { scale * (sigmoid(x) - t) } else { 0.0 })
                    .collect();
                acc(*logits, Matrix::from_raw(vl.rows(), vl.cols(), d));
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let vl = self.value(*logits);
                let count = labels.iter().flatten().count().max(1) as f64;
                let scale = g.data()[0] / count;
                let mut d = Matrix::zeros(vl.rows(), vl.cols());
                for (i, label) in labels.iter().enumerate() {
                    if let Some(y) = *label {
                        let row = vl.row(i);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (j, dj) in d.row_mut(i).iter_mut().enumerate() {
                            let p = (row[j] - max).exp() / z;
                            *dj = scale * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                }
                acc(*logits, d);
            }
        }
    }
}

fn broadcast_get(b: &Matrix, i: usize, j: usize) -> f64 {
    let bi = if b.rows() == 1 { 0 } else { i };
    let bj = if b.cols() == 1 { 0 } else { j };
    b.data()[bi * b.cols() + bj]
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape if the loss does not
    /// depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn for_params(&self, tape: &Tape, vars: &[Var]) -> Vec<Matrix> {
        vars.iter().map(|&v| self.wrt(tape, v)).collect()
    }
}
