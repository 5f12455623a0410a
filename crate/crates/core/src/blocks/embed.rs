//! Token pre-processing and output heads.

use serde::{Deserialize, Serialize};

use crate::blocks::norm::{layer_norm, LayerNormParams};
use crate::error::{shape_err, Result};
use crate::numeric::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct EmbeddingParams<T: Scalar> {
    /// Normalization of raw patches before projection.
    pub ln_in: Option<LayerNormParams<T>>,
    /// `d×D`.
    pub w_pre: Matrix<T>,
    pub b_pre: Option<Matrix<T>>,
    /// Normalization of projected patches.
    pub ln_out: Option<LayerNormParams<T>>,
    /// `d×n`.
    pub pos: Matrix<T>,
    pub cls: Option<Matrix<T>>,
    pub mask_token: Option<Matrix<T>>,
}

/// Projects raw `D×N` patches, prepends the class token when present, and adds
/// positional encodings.
pub fn preprocess<T: Scalar>(x: &Matrix<T>, emb: &EmbeddingParams<T>) -> Result<Matrix<T>> {
    let mut patches = match &emb.ln_in {
        Some(ln) => layer_norm(x, ln)?,
        None => x.clone(),
    };
    patches = emb.w_pre.matmul(&patches)?;
    if let Some(b) = &emb.b_pre {
        patches = patches.add_column_broadcast(b.as_slice())?;
    }
    if let Some(ln) = &emb.ln_out {
        patches = layer_norm(&patches, ln)?;
    }
    let tokens = match &emb.cls {
        Some(cls) => Matrix::hcat(&[cls, &patches])?,
        None => patches,
    };
    if tokens.shape() != emb.pos.shape() {
        return shape_err(format!(
            "positional encoding is {:?} but tokens are {:?}",
            emb.pos.shape(),
            tokens.shape()
        ));
    }
    tokens.add(&emb.pos)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct HeadParams<T: Scalar> {
    pub ln: Option<LayerNormParams<T>>,
    /// `C×d` (or `D×d` for reconstruction).
    pub weight: Matrix<T>,
    pub bias: Option<Matrix<T>>,
}

fn apply_head<T: Scalar>(feature: &Matrix<T>, head: &HeadParams<T>) -> Result<Matrix<T>> {
    let normed = match &head.ln {
        Some(ln) => layer_norm(feature, ln)?,
        None => feature.clone(),
    };
    let out = head.weight.matmul(&normed)?;
    match &head.bias {
        Some(b) => out.add_column_broadcast(b.as_slice()),
        None => Ok(out),
    }
}

/// Logits from the class-token feature `z_1`.
pub fn classifier_head<T: Scalar>(z: &Matrix<T>, head: &HeadParams<T>) -> Result<Vec<T>> {
    Ok(apply_head(&z.columns(0, 1)?, head)?.into_vec())
}

/// Logits from the mean token `(1/n) Z 1`.
pub fn pooling_head<T: Scalar>(z: &Matrix<T>, head: &HeadParams<T>) -> Result<Vec<T>> {
    let n = T::lit(z.cols().max(1) as f64);
    let mean: Vec<T> = z.row_sums().into_iter().map(|s| s / n).collect();
    Ok(apply_head(&Matrix::column_vector(&mean), head)?.into_vec())
}

/// Applies the head to every token.
pub fn token_head<T: Scalar>(z: &Matrix<T>, head: &HeadParams<T>) -> Result<Matrix<T>> {
    apply_head(z, head)
}
