//! Reverse-mode differentiation over rank-2 matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Leaves are either
//! trainable parameters, identified by a [`ParamId`], or frozen constants.
//! [`Tape::backward`] walks the tape once in reverse and returns one gradient
//! per registered parameter. Constants never receive gradients.

use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};

use super::ops::{self, quick_gelu, sigmoid, QUICK_GELU_SLOPE};
use super::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Opaque identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

/// Gradients of one backward pass, exactly one per registered parameter.
pub type GradRecord = BTreeMap<ParamId, Matrix>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    QuickGelu(Var),
    RowSoftmax(Var, f64),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Vec<f64>,
        eps: f64,
    },
    L2NormalizeRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherCols(Var, Vec<Vec<usize>>),
    PickPerRow(Var, Vec<usize>),
    RowNormalizeSum(Var),
    LogFloor(Var, f64),
    KlRows(Var, Var, f64),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// A single-threaded computation graph.
#[derive(Debug, Default)]
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v)
            .item()
            .ok_or_else(|| Error::Contract(format!("node has shape {:?}", self.value(v).shape())))
    }

    pub fn param(&mut self, id: ParamId, value: Matrix) -> Result<Var> {
        ensure!(
            !self.nodes.iter().any(|n| n.param == Some(id)),
            Contract,
            "parameter {id:?} registered twice"
        );
        Ok(self.push_node(value, Op::Leaf, Some(id), true))
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_node(value, Op::Leaf, None, false)
    }

    fn push_node(&mut self, value: Matrix, op: Op, param: Option<ParamId>, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            param,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Result<Var> {
        ensure!(value.is_finite(), Contract, "operation produced a non-finite value");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, None, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        ensure!(
            bm.rows() == 1 && bm.cols() == am.cols(),
            Dimension,
            "broadcast {:?} onto {:?}",
            bm.shape(),
            am.shape()
        );
        let value = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) + bm.get(0, j));
        self.push(value, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// `x · sigmoid(1.702 x)`.
    pub fn quick_gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(quick_gelu);
        self.push(value, Op::QuickGelu(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let value = ops::row_softmax(self.value(a), temperature)?;
        self.push(value, Op::RowSoftmax(a, temperature), &[a])
    }

    /// Row softmax restricted to the lower triangle (diagonal included).
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        ensure!(m.rows() == m.cols(), Dimension, "causal softmax needs a square matrix");
        let value = ops::causal_softmax(m);
        self.push(value, Op::CausalSoftmax(a), &[a])
    }

    /// Per-row layer normalisation with a frozen affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Var> {
        let m = self.value(x);
        ensure!(
            gamma.len() == m.cols() && beta.len() == m.cols(),
            Dimension,
            "layer norm affine width"
        );
        let value = ops::layer_norm_forward(m, gamma, beta, eps);
        let op = Op::LayerNorm {
            x,
            gamma: gamma.to_vec(),
            eps,
        };
        self.push(value, op, &[x])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let value = ops::l2_normalize_rows(self.value(a))?;
        self.push(value, Op::L2NormalizeRows(a), &[a])
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize_rows(a)?;
        let bn = self.l2_normalize_rows(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row `i` of the output is `a[i][indices[i][0]], a[i][indices[i][1]], ...`.
    ///
    /// The indices themselves carry no gradient.
    pub fn gather_cols(&mut self, a: Var, indices: Vec<Vec<usize>>) -> Result<Var> {
        let m = self.value(a);
        ensure!(
            indices.len() == m.rows(),
            Dimension,
            "{} index rows for {} matrix rows",
            indices.len(),
            m.rows()
        );
        let width = indices.first().map_or(0, Vec::len);
        ensure!(
            indices.iter().all(|r| r.len() == width),
            Dimension,
            "ragged gather indices"
        );
        let mut values = Vec::with_capacity(m.rows() * width);
        for (i, idx) in indices.iter().enumerate() {
            values.extend(ops::gather(m.row(i), idx)?);
        }
        let value = Matrix::from_vec(m.rows(), width, values)?;
        self.push(value, Op::GatherCols(a, indices), &[a])
    }

    /// Column vector holding `a[i][labels[i]]`.
    pub fn pick_per_row(&mut self, a: Var, labels: Vec<usize>) -> Result<Var> {
        let m = self.value(a);
        ensure!(labels.len() == m.rows(), Dimension, "one label per row");
        ensure!(
            labels.iter().all(|&l| l < m.cols()),
            Parameter,
            "label out of range for {} columns",
            m.cols()
        );
        let value = Matrix::from_fn(m.rows(), 1, |i, _| m.get(i, labels[i]));
        self.push(value, Op::PickPerRow(a, labels), &[a])
    }

    /// Divides each row by its sum.
    pub fn row_normalize_sum(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let mut value = m.clone();
        for i in 0..m.rows() {
            let total: f64 = m.row(i).iter().sum();
            ensure!(total > 0.0, Degenerate, "row {i} sums to {total}");
            for v in value.row_mut(i) {
                *v /= total;
            }
        }
        self.push(value, Op::RowNormalizeSum(a), &[a])
    }

    /// `ln(max(x, floor))` elementwise.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        ensure!(floor > 0.0, Parameter, "log floor must be positive");
        let value = self.value(a).map(|v| v.max(floor).ln());
        self.push(value, Op::LogFloor(a, floor), &[a])
    }

    /// Column vector of row-wise `KL(q_i || p_i) = sum_j q_ij ln(q_ij / max(p_ij, floor))`.
    pub fn kl_rows(&mut self, q: Var, p: Var, floor: f64) -> Result<Var> {
        let (qm, pm) = (self.value(q), self.value(p));
        ensure!(qm.shape() == pm.shape(), Dimension, "KL operands differ in shape");
        let value = Matrix::from_fn(qm.rows(), 1, |i, _| kl_row(qm.row(i), pm.row(i), floor));
        self.push(value, Op::KlRows(q, p, floor), &[q, p])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        ensure!(!m.values().is_empty(), Dimension, "mean of an empty matrix");
        let value = Matrix::scalar(m.sum() / m.values().len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Gradients of the scalar `loss` with respect to every registered parameter.
    ///
    /// Parameters the loss does not depend on get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<GradRecord> {
        ensure!(
            self.value(loss).shape() == (1, 1),
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if node.param.is_some() {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut record = GradRecord::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                record.insert(id, g);
            }
        }
        Ok(record)
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let y = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, ops::matmul(g, &val(*b).transpose()).expect("shapes checked"));
                }
                if wants(*b) {
                    send(*b, ops::matmul(&val(*a).transpose(), g).expect("shapes checked"));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.hadamard(val(*b)).expect("shapes checked"));
                }
                if wants(*b) {
                    send(*b, g.hadamard(val(*a)).expect("shapes checked"));
                }
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                if wants(*b) {
                    let mut col_sums = Matrix::zeros(1, g.cols());
                    for row in g.row_iter() {
                        for (s, v) in col_sums.values_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    send(*b, col_sums);
                }
            }
            Op::Scale(a, factor) => send(*a, g.scale(*factor)),
            Op::Exp(a) => send(*a, g.hadamard(y).expect("same shape")),
            Op::QuickGelu(a) => {
                let dx = g
                    .zip_with(val(*a), |gv, x| {
                        let s = sigmoid(QUICK_GELU_SLOPE * x);
                        gv * (s + QUICK_GELU_SLOPE * x * s * (1.0 - s))
                    })
                    .expect("same shape");
                send(*a, dx);
            }
            Op::RowSoftmax(a, temperature) => send(*a, softmax_backward(y, g, *temperature)),
            Op::CausalSoftmax(a) => send(*a, softmax_backward(y, g, 1.0)),
            Op::LayerNorm { x, gamma, eps } => {
                send(*x, layer_norm_backward(val(*x), gamma, *eps, g));
            }
            Op::L2NormalizeRows(a) => {
                let norms = ops::row_norms(val(*a));
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for (i, norm) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                send(*a, dx);
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                send(*a, dx);
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    dx.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                send(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if wants(p) {
                        send(p, g.slice_rows(offset, rows).expect("in range"));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if wants(p) {
                        send(p, g.slice_cols(offset, cols).expect("in range"));
                    }
                    offset += cols;
                }
            }
            Op::GatherCols(a, indices) => {
                let src = val(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (i, idx) in indices.iter().enumerate() {
                    let row = dx.row_mut(i);
                    for (j, &c) in idx.iter().enumerate() {
                        row[c] += g.get(i, j);
                    }
                }
                send(*a, dx);
            }
            Op::PickPerRow(a, labels) => {
                let src = val(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (i, &l) in labels.iter().enumerate() {
                    dx.set(i, l, g.get(i, 0));
                }
                send(*a, dx);
            }
            Op::RowNormalizeSum(a) => {
                let src = val(*a);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    let total: f64 = src.row(i).iter().sum();
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = (gr[j] - dot) / total;
                    }
                }
                send(*a, dx);
            }
            Op::LogFloor(a, floor) => {
                let dx = g
                    .zip_with(val(*a), |gv, x| if x > *floor { gv / x } else { 0.0 })
                    .expect("same shape");
                send(*a, dx);
            }
            Op::KlRows(q, p, floor) => {
                let (qm, pm) = (val(*q), val(*p));
                if wants(*q) {
                    let dq = Matrix::from_fn(qm.rows(), qm.cols(), |i, j| {
                        let qv = qm.get(i, j);
                        if qv > 0.0 {
                            g.get(i, 0) * (qv.ln() - pm.get(i, j).max(*floor).ln() + 1.0)
                        } else {
                            0.0
                        }
                    });
                    send(*q, dq);
                }
                if wants(*p) {
                    let dp = Matrix::from_fn(pm.rows(), pm.cols(), |i, j| {
                        let pv = pm.get(i, j);
                        if pv > *floor {
                            -g.get(i, 0) * qm.get(i, j) / pv
                        } else {
                            0.0
                        }
                    });
                    send(*p, dp);
                }
            }
            Op::Sum(a) => {
                let src = val(*a);
                send(*a, Matrix::filled(src.rows(), src.cols(), g.values()[0]));
            }
            Op::Mean(a) => {
                let src = val(*a);
                let n = src.values().len() as f64;
                send(*a, Matrix::filled(src.rows(), src.cols(), g.values()[0] / n));
            }
        }
    }
}

pub(crate) fn kl_row(q: &[f64], p: &[f64], floor: f64) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qv, _)| qv > 0.0)
        .map(|(&qv, &pv)| qv * (qv.ln() - pv.max(floor).ln()))
        .sum()
}

fn softmax_backward(y: &Matrix, g: &Matrix, temperature: f64) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let (yr, gr) = (y.row(i), g.row(i));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = yr[j] * (gr[j] - dot) / temperature;
        }
    }
    dx
}

fn layer_norm_backward(x: &Matrix, gamma: &[f64], eps: f64, g: &Matrix) -> Matrix {
    let d = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv_std = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
        let dxhat: Vec<f64> = g.row(i).iter().zip(gamma).map(|(a, b)| a * b).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / d;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    dx
}
