use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::autodiff::standardize_columns;
use crate::numeric::matrix::Matrix;
use crate::scalar::Scalar;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Per-token affine normalization parameters; `gain` and `bias` are `d×1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct LayerNormParams<T: Scalar> {
    pub gain: Matrix<T>,
    pub bias: Matrix<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNormParams<T> {
    /// Unit gain, zero bias.
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Matrix::filled(d, 1, T::one()),
            bias: Matrix::zeros(d, 1),
            eps: T::lit(DEFAULT_LN_EPS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.cols() != 1 || self.bias.shape() != self.gain.shape() {
            return shape_err(format!(
                "gain {:?} and bias {:?} must be matching column vectors",
                self.gain.shape(),
                self.bias.shape()
            ));
        }
        if !(self.eps > T::zero()) {
            return Err(Error::InvalidArgument("layer-norm eps must be positive".into()));
        }
        Ok(())
    }
}

/// Standardizes every column, then applies `gain ⊙ x̂ + bias`.
pub fn layer_norm<T: Scalar>(z: &Matrix<T>, params: &LayerNormParams<T>) -> Result<Matrix<T>> {
    params.validate()?;
    if z.rows() != params.gain.rows() {
        return shape_err(format!("tokens have {} rows, layer norm expects {}", z.rows(), params.gain.rows()));
    }
    let (xhat, _) = standardize_columns(z, params.eps);
    Ok(Matrix::from_fn(z.rows(), z.cols(), |r, c| {
        params.gain[(r, 0)] * xhat[(r, c)] + params.bias[(r, 0)]
    }))
}
