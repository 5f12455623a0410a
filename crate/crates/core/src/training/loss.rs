//! Classification and reconstruction losses, plain and recorded on a tape.

use crate::error::{shape_err, Error, Result};
use crate::numeric::autodiff::{Tape, Var};
use crate::numeric::matrix::Matrix;
use crate::numeric::softmax::log_sum_exp;
use crate::scalar::Scalar;

/// Smoothed one-hot target `(1 − s)·e_label + s/C`; sums to 1.
pub fn smoothed_targets<T: Scalar>(label: usize, num_classes: usize, smoothing: T) -> Result<Vec<T>> {
    if label >= num_classes {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {num_classes} classes")));
    }
    if !(smoothing >= T::zero() && smoothing < T::one()) {
        return Err(Error::InvalidArgument(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let off = smoothing / T::lit(num_classes as f64);
    Ok((0..num_classes)
        .map(|c| if c == label { T::one() - smoothing + off } else { off })
        .collect())
}

/// `−Σ_c p_c log softmax(logits)_c`.
pub fn cross_entropy<T: Scalar>(target: &[T], logits: &[T]) -> Result<T> {
    if target.len() != logits.len() {
        return shape_err(format!("{} targets for {} logits", target.len(), logits.len()));
    }
    let lse = log_sum_exp(logits);
    Ok(target
        .iter()
        .zip(logits)
        .filter(|(p, _)| **p != T::zero())
        .map(|(p, l)| -*p * (*l - lse))
        .sum())
}

/// Squared Frobenius reconstruction error; with `masked_only`, only the
/// columns in `omega` count.
pub fn reconstruction_error<T: Scalar>(
    recon: &Matrix<T>,
    x: &Matrix<T>,
    omega: &[usize],
    masked_only: bool,
) -> Result<T> {
    let diff = recon.sub(x)?;
    if !masked_only {
        return diff.dot(&diff);
    }
    let mut total = T::zero();
    for &j in omega {
        total += (0..diff.rows()).map(|r| diff[(r, j)] * diff[(r, j)]).sum::<T>();
    }
    Ok(total)
}

/// Mean reconstruction error of `model_fn(mask(X))` over a batch.
pub fn mae_loss<T: Scalar, F>(model_fn: F, batch: &[(Matrix<T>, Vec<usize>)], masked_only: bool) -> Result<T>
where
    F: Fn(&Matrix<T>, &[usize]) -> Result<Matrix<T>>,
{
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = T::zero();
    for (x, omega) in batch {
        total += reconstruction_error(&model_fn(x, omega)?, x, omega, masked_only)?;
    }
    Ok(total / T::lit(batch.len() as f64))
}

pub fn tape_cross_entropy<T: Scalar>(tape: &Tape<T>, logits: Var, target: &[T]) -> Result<Var> {
    let logp = tape.log_softmax_columns(logits)?;
    let t = tape.constant(Matrix::column_vector(target));
    let weighted = tape.mul(logp, t)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -T::one()))
}

pub fn tape_reconstruction_error<T: Scalar>(
    tape: &Tape<T>,
    recon: Var,
    x: &Matrix<T>,
    omega: &[usize],
    masked_only: bool,
) -> Result<Var> {
    let target = tape.constant(x.clone());
    let mut diff = tape.sub(recon, target)?;
    if masked_only {
        let mut keep = Matrix::zeros(x.rows(), x.cols());
        for &j in omega {
            for r in 0..x.rows() {
                keep[(r, j)] = T::one();
            }
        }
        let keep = tape.constant(keep);
        diff = tape.mul(diff, keep)?;
    }
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}
