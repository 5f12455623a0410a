//! Sparsification step against a learned dictionary.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numeric::autodiff::{Tape, Var};
use crate::numeric::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct DictionaryParams<T: Scalar> {
    /// `d×d` analysis dictionary.
    pub d: Matrix<T>,
    pub eta: T,
    pub lambda: T,
}

fn check<T: Scalar>(z: &Matrix<T>, d: &Matrix<T>) -> Result<()> {
    if d.rows() != d.cols() || d.cols() != z.rows() {
        return shape_err(format!("dictionary {:?} does not fit tokens {:?}", d.shape(), z.shape()));
    }
    Ok(())
}

/// `ReLU(Z − ηDᵀ(DZ − Z) − ηλ)`.
pub fn ista_step<T: Scalar>(z_in: &Matrix<T>, dict: &DictionaryParams<T>) -> Result<Matrix<T>> {
    check(z_in, &dict.d)?;
    let residual = dict.d.matmul(z_in)?.sub(z_in)?;
    let grad = dict.d.t_matmul(&residual)?;
    let shift = dict.eta * dict.lambda;
    z_in.zip_map(&grad, |z, g| (z - dict.eta * g - shift).max(T::zero()))
}

/// `λ‖Z‖₁ + ½‖Z_in − DZ‖²_F`.
pub fn lasso_objective<T: Scalar>(z: &Matrix<T>, z_in: &Matrix<T>, d: &Matrix<T>, lambda: T) -> Result<T> {
    check(z, d)?;
    let r = z_in.sub(&d.matmul(z)?)?;
    Ok(lambda * z.l1_norm() + T::lit(0.5) * r.dot(&r)?)
}

/// Proximal majorization-minimization alternative:
/// `ReLU((1 + 4/(9(1+α)))·DᵀZ − 4λ/(9α))`.
pub fn prox_mm_step<T: Scalar>(z_in: &Matrix<T>, d: &Matrix<T>, alpha: T, lambda: T) -> Result<Matrix<T>> {
    check(z_in, d)?;
    let nine = T::lit(9.0);
    let four = T::lit(4.0);
    let coeff = T::one() + four / (nine * (T::one() + alpha));
    let threshold = four * lambda / (nine * alpha);
    Ok(d.t_matmul(z_in)?.map(|v| (coeff * v - threshold).max(T::zero())))
}

/// Tape version of [`ista_step`].
pub fn tape_ista<T: Scalar>(tape: &Tape<T>, z: Var, d: Var, eta: T, lambda: T) -> Result<Var> {
    let dz = tape.matmul(d, z)?;
    let residual = tape.sub(dz, z)?;
    let dt = tape.transpose(d);
    let grad = tape.matmul(dt, residual)?;
    let step = tape.scale(grad, eta);
    let moved = tape.sub(z, step)?;
    let shifted = tape.offset(moved, -(eta * lambda));
    Ok(tape.relu(shifted))
}
