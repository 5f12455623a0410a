#![allow(dead_code)]

use crate_core::numeric::rng::normal_matrix;
use crate_core::{Mat64, RngStream};
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    RngStream::new(seed, 0x7465_7374).generator()
}

pub fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat64 {
    normal_matrix(rows, cols, 1.0, rng)
}

pub fn to_na(m: &Mat64) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Mat64 {
    Mat64::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

pub fn singular_values(m: &Mat64) -> Vec<f64> {
    to_na(m).singular_values().iter().copied().collect()
}

/// `Σ log(1 + scale·sᵢ²)` over the singular values.
pub fn logdet_oracle(m: &Mat64, scale: f64) -> f64 {
    singular_values(m).iter().map(|s| (1.0 + scale * s * s).ln()).sum()
}

pub fn na_inverse(m: &Mat64) -> Mat64 {
    from_na(&to_na(m).try_inverse().expect("invertible"))
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Mat64 {
    from_na(&to_na(&randn(d, d, rng)).qr().q())
}

pub fn spectral_norm(m: &Mat64) -> f64 {
    singular_values(m).into_iter().fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn fd_grad(x: &Mat64, h: f64, f: impl Fn(&Mat64) -> f64) -> Mat64 {
    let mut g = Mat64::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = x.clone();
        minus.as_mut_slice()[i] -= h;
        g.as_mut_slice()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

pub fn rel(a: &Mat64, b: &Mat64) -> f64 {
    let diff = a.sub(b).unwrap().frobenius_norm();
    diff / b.frobenius_norm().max(1e-300)
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    let scale = a.abs().max(b.abs()).max(1.0);
    assert!((a - b).abs() <= tol * scale, "{a} vs {b} (tol {tol})");
}
