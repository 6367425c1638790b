//! Forward kernels shared by the plain-matrix API and the tape.

use crate::error::{ensure, Error, Result};

use super::Matrix;

/// `a · b`, accumulating each output entry over the inner index in order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure!(
        a.cols() == b.rows(),
        Dimension,
        "matmul {:?} x {:?}",
        a.shape(),
        b.shape()
    );
    let (n, inner, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &a_ik) in a_row.iter().enumerate().take(inner) {
            let b_row = b.row(k);
            for j in 0..m {
                out_row[j] += a_ik * b_row[j];
            }
        }
    }
    Ok(out)
}

/// Softmax of every row of `m / temperature`, stabilised by subtracting the row max.
pub fn row_softmax(m: &Matrix, temperature: f64) -> Result<Matrix> {
    ensure!(
        temperature > 0.0 && temperature.is_finite(),
        Parameter,
        "temperature must be positive, got {temperature}"
    );
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax where row `i` only sees columns `0..=i`; masked entries are exactly zero.
pub(crate) fn causal_softmax(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let visible = (i + 1).min(m.cols());
        let row = out.row_mut(i);
        row[..visible].copy_from_slice(&m.row(i)[..visible]);
        softmax_in_place(&mut row[..visible], 1.0);
    }
    out
}

pub(crate) fn row_norms(m: &Matrix) -> Vec<f64> {
    m.row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Scales each row to unit L2 norm. Zero rows are rejected.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let norms = row_norms(m);
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("row {i} has zero norm")));
    }
    let mut out = m.clone();
    for (i, norm) in norms.iter().enumerate() {
        for v in out.row_mut(i) {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure!(
        a.cols() == b.cols(),
        Dimension,
        "cosine similarity needs equal widths, got {} and {}",
        a.cols(),
        b.cols()
    );
    let a = l2_normalize_rows(a)?;
    let b = l2_normalize_rows(b)?;
    let mut out = matmul(&a, &b.transpose())?;
    // rounding can push |cos| a few ulps past 1
    for v in out.values_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// Indices of the `k` largest values, largest first; equal values keep ascending index order.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    ensure!(
        k >= 1 && k <= values.len(),
        Parameter,
        "k = {k} outside 1..={}",
        values.len()
    );
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps ascending index among ties
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx.truncate(k);
    Ok(idx)
}

pub fn gather(values: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            values.get(i).copied().ok_or_else(|| {
                Error::Parameter(format!("index {i} out of range for {}", values.len()))
            })
        })
        .collect()
}

/// Index of the largest value, first occurrence on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub(crate) fn layer_norm_forward(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Matrix {
    let d = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = gamma[j] * (row[j] - mean) * inv_std + beta[j];
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) const QUICK_GELU_SLOPE: f64 = 1.702;

#[inline]
pub(crate) fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(QUICK_GELU_SLOPE * x)
}
