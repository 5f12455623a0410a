//! Factorizations on small dense matrices: Cholesky (with a single jitter
//! retry), log-determinants of `I + s·GᵀG`, SPD solves, and a cyclic Jacobi
//! eigensolver for symmetric matrices.

use crate::error::{shape_err, Error, Result};
use crate::numeric::matrix::Matrix;
use crate::scalar::Scalar;

fn symmetry_tolerance<T: Scalar>() -> T {
    T::lit(1e-10).max(T::epsilon() * T::lit(64.0))
}

fn check_symmetric<T: Scalar>(a: &Matrix<T>) -> Result<()> {
    let (n, m) = a.shape();
    if n != m {
        return shape_err(format!("expected a square matrix, got {n}x{m}"));
    }
    let scale = a.max_abs().max(T::min_positive_value());
    let mut worst = T::zero();
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    let rel = worst / scale;
    if rel > symmetry_tolerance::<T>() {
        return Err(Error::NotSymmetric(rel.to_f64_lossy()));
    }
    Ok(())
}

/// Lower-triangular `L` with `L·Lᵀ = A`.
///
/// Fails with `NotPositiveDefinite` when a pivot drops to `1e-12·trace(A)/n`
/// or below.
pub fn cholesky_posdef<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    check_symmetric(a)?;
    let n = a.rows();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let floor = T::lit(1e-12) * (a.trace() / T::lit(n as f64)).abs();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > floor) {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: pivot.to_f64_lossy(),
            });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Cholesky with one retry after adding `1e-10·trace/n` to the diagonal.
pub fn cholesky_jittered<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    match cholesky_posdef(a) {
        Ok(l) => Ok(l),
        Err(Error::NotPositiveDefinite { .. }) => {
            let n = a.rows();
            let jitter = T::lit(1e-10) * (a.trace() / T::lit(n as f64)).abs();
            let mut shifted = a.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            cholesky_posdef(&shifted)
        }
        Err(e) => Err(e),
    }
}

/// Solves `L·Lᵀ·X = B` given the Cholesky factor `L`.
pub fn cholesky_solve<T: Scalar>(l: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let n = l.rows();
    if b.rows() != n {
        return shape_err(format!("cholesky_solve: factor {n}x{n}, rhs {}x{}", b.rows(), b.cols()));
    }
    let m = b.cols();
    let mut x = b.clone();
    // forward: L·Y = B
    for c in 0..m {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // backward: Lᵀ·X = Y
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// `log det(A)` from its Cholesky factor.
pub fn logdet_from_cholesky<T: Scalar>(l: &Matrix<T>) -> T {
    (0..l.rows()).map(|i| l[(i, i)].ln()).sum::<T>() * T::lit(2.0)
}

/// `I + scale·GᵀG` (n×n for a d×n `G`).
pub fn shifted_gram<T: Scalar>(g: &Matrix<T>, scale: T) -> Matrix<T> {
    let mut m = g.t_matmul(g).expect("gram of a matrix with itself").scale(scale);
    for i in 0..m.rows() {
        m[(i, i)] += T::one();
    }
    m
}

/// `I + scale·GGᵀ` (d×d for a d×n `G`).
pub fn shifted_outer_gram<T: Scalar>(g: &Matrix<T>, scale: T) -> Matrix<T> {
    let mut m = g.matmul_t(g).expect("outer gram of a matrix with itself").scale(scale);
    for i in 0..m.rows() {
        m[(i, i)] += T::one();
    }
    m
}

/// `log det(I + scale·ZᵀZ)`, evaluated through whichever of `ZᵀZ` and `ZZᵀ`
/// is smaller (their nonzero spectra coincide).
pub fn logdet_gram<T: Scalar>(z: &Matrix<T>, scale: T) -> Result<T> {
    if scale <= T::zero() {
        return Err(Error::InvalidArgument(format!("logdet_gram scale must be positive, got {scale}")));
    }
    if z.is_empty() {
        return Ok(T::zero());
    }
    let gram = if z.rows() < z.cols() {
        shifted_outer_gram(z, scale)
    } else {
        shifted_gram(z, scale)
    };
    let l = cholesky_jittered(&gram)?;
    Ok(logdet_from_cholesky(&l))
}

/// `Z·(I + scale·ZᵀZ)⁻¹`, computed as a Cholesky solve on the smaller side
/// (`(I + scale·ZZᵀ)⁻¹·Z` when `d < n`).
pub fn gram_solve<T: Scalar>(z: &Matrix<T>, scale: T) -> Result<Matrix<T>> {
    if z.is_empty() {
        return Ok(z.clone());
    }
    if z.rows() < z.cols() {
        let l = cholesky_jittered(&shifted_outer_gram(z, scale))?;
        cholesky_solve(&l, z)
    } else {
        let l = cholesky_jittered(&shifted_gram(z, scale))?;
        Ok(cholesky_solve(&l, &z.transpose())?.transpose())
    }
}

/// Solves `A·X = B` for symmetric positive definite `A`.
pub fn solve_spd<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let l = cholesky_jittered(a)?;
    cholesky_solve(&l, b)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in ascending order and the matching unit eigenvectors
/// as columns.
pub fn sym_eigen<T: Scalar>(a: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = Matrix::identity(n);
    let tol = T::epsilon() * T::lit(0.5);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..i {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        let total = m.frobenius_norm();
        if off.sqrt() <= tol * total.max(T::min_positive_value()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = v.select_columns(&order)?;
    Ok((values, vectors))
}

/// `f(A) = V·diag(f(λ))·Vᵀ` for symmetric `A`.
pub fn sym_apply<T: Scalar>(a: &Matrix<T>, f: impl Fn(T) -> T) -> Result<Matrix<T>> {
    let (vals, vecs) = sym_eigen(a)?;
    let n = a.rows();
    let scaled = Matrix::from_fn(n, n, |r, c| vecs[(r, c)] * f(vals[c]));
    scaled.matmul_t(&vecs)
}

/// `A^(-1/2)` for symmetric PSD `A`, with eigenvalues clamped at `1e-12`.
pub fn inv_sqrt_psd<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let floor = T::lit(1e-12);
    sym_apply(a, |l| T::one() / l.max(floor).sqrt())
}

/// Orthonormalizes the columns of `a` by twice-iterated modified
/// Gram-Schmidt. Errors when the columns are numerically dependent.
pub fn orthonormalize_columns<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let (d, p) = a.shape();
    if p > d {
        return Err(Error::InvalidArgument(format!(
            "cannot orthonormalize {p} columns in dimension {d}"
        )));
    }
    let mut q = a.clone();
    for j in 0..p {
        let original = norm_of_column(&q, j);
        for _pass in 0..2 {
            for k in 0..j {
                let proj: T = (0..d).map(|r| q[(r, k)] * q[(r, j)]).sum();
                for r in 0..d {
                    let qk = q[(r, k)];
                    q[(r, j)] -= proj * qk;
                }
            }
        }
        let nrm = norm_of_column(&q, j);
        if !(nrm > T::lit(1e-10) * original.max(T::min_positive_value())) || nrm == T::zero() {
            return Err(Error::InvalidArgument(format!("column {j} is linearly dependent")));
        }
        for r in 0..d {
            q[(r, j)] /= nrm;
        }
    }
    Ok(q)
}

fn norm_of_column<T: Scalar>(m: &Matrix<T>, c: usize) -> T {
    (0..m.rows()).map(|r| m[(r, c)] * m[(r, c)]).sum::<T>().sqrt()
}

/// Largest deviation of `AᵀA` from the identity.
pub fn orthonormality_defect<T: Scalar>(a: &Matrix<T>) -> T {
    let g = a.t_matmul(a).expect("gram");
    let mut worst = T::zero();
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_identity_and_diagonal() {
        let i3 = Matrix::<f64>::identity(3);
        assert_eq!(cholesky_posdef(&i3).unwrap(), i3);
        let d = Matrix::diag(&[4.0, 9.0]);
        assert_eq!(cholesky_posdef(&d).unwrap(), Matrix::diag(&[2.0, 3.0]));
    }

    #[test]
    fn cholesky_rejects_indefinite_and_asymmetric() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(cholesky_posdef(&a), Err(Error::NotPositiveDefinite { index: 1, .. })));
        let b = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(matches!(cholesky_posdef(&b), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn jitter_rescues_a_singular_gram() {
        // rank-one PSD: exact pivot 0 on the second column
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(cholesky_posdef(&a).is_err());
        let l = cholesky_jittered(&a).unwrap();
        assert!(l[(1, 1)] > 0.0 && l[(1, 1)] < 1e-4);
    }

    #[test]
    fn logdet_gram_trivial_cases() {
        assert_eq!(logdet_gram(&Matrix::<f64>::zeros(3, 5), 2.0).unwrap(), 0.0);
        let v = logdet_gram(&Matrix::<f64>::identity(2), 3.0).unwrap();
        assert!((v - 2.0 * 4f64.ln()).abs() < 1e-14);
        assert!(logdet_gram(&Matrix::<f64>::identity(2), 0.0).is_err());
    }

    #[test]
    fn eigen_of_small_symmetric() {
        let a = Matrix::from_rows(&[vec![2.0f64, 1.0], vec![1.0, 2.0]]);
        let (vals, vecs) = sym_eigen(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
        let recon = sym_apply(&a, |x| x).unwrap();
        assert!(recon.rel_error(&a) < 1e-14);
        assert!(orthonormality_defect(&vecs) < 1e-14);
    }

    #[test]
    fn orthonormalize_detects_dependence() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]]);
        assert!(orthonormalize_columns(&a).is_err());
        let b = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert!(orthonormality_defect(&orthonormalize_columns(&b).unwrap()) < 1e-15);
    }
}
