use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Which triangle of a square score matrix survives a causal mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalConvention {
    /// Keep `(i, j)` with `i ≤ j`. With column-wise softmax, column `j` then
    /// weighs only tokens `i ≤ j`.
    #[default]
    Literal,
    /// Keep `(i, j)` with `i ≥ j`.
    Transposed,
}

pub fn causal_keep(convention: CausalConvention, i: usize, j: usize) -> bool {
    match convention {
        CausalConvention::Literal => i <= j,
        CausalConvention::Transposed => i >= j,
    }
}

/// Sets the masked entries of a square matrix to `−∞`.
pub fn causal_mask<T: Scalar>(a: &Matrix<T>, convention: CausalConvention) -> Result<Matrix<T>> {
    if a.rows() != a.cols() {
        return Err(Error::ShapeMismatch(format!(
            "causal mask needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    Ok(Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        if causal_keep(convention, i, j) {
            a[(i, j)]
        } else {
            T::neg_infinity()
        }
    }))
}

/// Column-wise softmax with per-column max subtraction. `−∞` entries (from a
/// causal mask) receive zero weight; a column with no finite entry is an error.
/// NaN columns propagate as NaN.
pub fn softmax_columns<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let (rows, cols) = a.shape();
    let mut out = Matrix::zeros(rows, cols);
    for c in 0..cols {
        if (0..rows).any(|r| a[(r, c)].is_nan()) {
            for r in 0..rows {
                out[(r, c)] = T::nan();
            }
            continue;
        }
        let max = (0..rows).fold(T::neg_infinity(), |m, r| m.max(a[(r, c)]));
        if max == T::neg_infinity() {
            return Err(Error::DegenerateColumn(c));
        }
        let mut total = T::zero();
        for r in 0..rows {
            let e = (a[(r, c)] - max).exp();
            out[(r, c)] = e;
            total += e;
        }
        for r in 0..rows {
            out[(r, c)] /= total;
        }
    }
    Ok(out)
}

/// Column-wise log-softmax, stabilized by log-sum-exp.
pub fn log_softmax_columns<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let (rows, cols) = a.shape();
    let mut out = Matrix::zeros(rows, cols);
    for c in 0..cols {
        if (0..rows).any(|r| a[(r, c)].is_nan()) {
            for r in 0..rows {
                out[(r, c)] = T::nan();
            }
            continue;
        }
        let max = (0..rows).fold(T::neg_infinity(), |m, r| m.max(a[(r, c)]));
        if max == T::neg_infinity() {
            return Err(Error::DegenerateColumn(c));
        }
        let lse = max + (0..rows).map(|r| (a[(r, c)] - max).exp()).sum::<T>().ln();
        for r in 0..rows {
            out[(r, c)] = a[(r, c)] - lse;
        }
    }
    Ok(out)
}

/// Softmax of a plain vector.
pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(v_i)`.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if max == T::neg_infinity() {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_keeps_upper_triangle_by_default() {
        let a = Matrix::filled(3, 3, 1.0);
        let m = causal_mask(&a, CausalConvention::Literal).unwrap();
        assert_eq!(m[(0, 2)], 1.0);
        assert_eq!(m[(2, 0)], f64::NEG_INFINITY);
        let s = softmax_columns(&m).unwrap();
        assert_eq!(s[(0, 0)], 1.0);
        assert!((s[(0, 2)] - 1.0 / 3.0).abs() < 1e-15);
        let t = causal_mask(&a, CausalConvention::Transposed).unwrap();
        assert_eq!(t, m.transpose());
        assert!(causal_mask(&Matrix::filled(2, 3, 0.0), CausalConvention::Literal).is_err());
    }

    #[test]
    fn documented_examples() {
        let one = softmax_columns(&Matrix::from_rows(&[vec![7.3]])).unwrap();
        assert_eq!(one[(0, 0)], 1.0);
        let sym = softmax_columns(&Matrix::from_rows(&[vec![0.0], vec![0.0]])).unwrap();
        assert_eq!(sym.column(0), vec![0.5, 0.5]);
        let skew = softmax_columns(&Matrix::from_rows(&[vec![0.0], vec![3f64.ln()]])).unwrap();
        assert!((skew[(0, 0)] - 0.25).abs() < 1e-15 && (skew[(1, 0)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn masked_entries_and_degenerate_columns() {
        let ninf = f64::NEG_INFINITY;
        let a = Matrix::from_rows(&[vec![1.0, ninf], vec![ninf, ninf]]);
        assert!(matches!(softmax_columns(&a), Err(Error::DegenerateColumn(1))));
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![ninf, 0.5]]);
        let s = softmax_columns(&b).unwrap();
        assert_eq!(s.column(0), vec![1.0, 0.0]);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let a = Matrix::from_rows(&[vec![1000.0f64], vec![1001.0]]);
        let s = softmax_columns(&a).unwrap();
        assert!(s.is_finite());
        let ls = log_softmax_columns(&a).unwrap();
        assert!((ls[(1, 0)].exp() - s[(1, 0)]).abs() < 1e-12);
    }
}
