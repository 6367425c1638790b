//! Central finite differences, the reference for every analytic gradient.

use super::Matrix;
use crate::par::Execution;

/// `(f(x + h e_c) - f(x - h e_c)) / 2h` for every coordinate `c` of `x`.
pub fn central_difference<F>(f: F, x: &Matrix, h: f64, exec: Execution) -> Matrix
where
    F: Fn(&Matrix) -> f64 + Sync + Send,
{
    let values = exec.map_range(x.values().len(), |c| {
        let mut plus = x.clone();
        plus.values_mut()[c] += h;
        let mut minus = x.clone();
        minus.values_mut()[c] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    });
    Matrix::from_fn(x.rows(), x.cols(), |i, j| values[i * x.cols() + j])
}

/// Worst coordinate of `|analytic - numeric| / max(|numeric|, floor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeError {
    pub max_rel_err: f64,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> RelativeError {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = RelativeError {
        max_rel_err: 0.0,
        row: 0,
        col: 0,
        analytic: analytic.values().first().copied().unwrap_or(0.0),
        numeric: numeric.values().first().copied().unwrap_or(0.0),
    };
    for i in 0..analytic.rows() {
        for j in 0..analytic.cols() {
            let (a, n) = (analytic.get(i, j), numeric.get(i, j));
            let err = (a - n).abs() / n.abs().max(RELATIVE_ERROR_FLOOR);
            if err > worst.max_rel_err {
                worst = RelativeError {
                    max_rel_err: err,
                    row: i,
                    col: j,
                    analytic: a,
                    numeric: n,
                };
            }
        }
    }
    worst
}
