//! Subspace self-attention.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::autodiff::{Tape, Var};
use crate::numeric::matrix::Matrix;
use crate::numeric::softmax::{causal_mask, softmax_columns, CausalConvention};
use crate::rate::{RateParams, SubspaceBasisSet};
use crate::scalar::Scalar;

/// How the stacked head outputs are mapped back to `d` dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub enum OutProjection<T: Scalar> {
    /// `β[U_1, …, U_K]`, with `β = p/(nε²)` recomputed from the token count.
    ExactBasis { epsilon: T },
    /// A free `d×(pK)` matrix plus optional `d×1` bias.
    Trainable { weight: Matrix<T>, bias: Option<Matrix<T>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct AttentionParams<T: Scalar> {
    /// `(pK)×d`; rows `kp..(k+1)p` hold `U_kᵀ`.
    pub qkv: Matrix<T>,
    pub out: OutProjection<T>,
    pub heads: usize,
    pub head_dim: usize,
    pub scale: T,
}

/// `p^(−1/2)` when `scaled`, else 1.
pub fn softmax_scale<T: Scalar>(head_dim: usize, scaled: bool) -> T {
    if scaled {
        T::one() / T::lit(head_dim as f64).sqrt()
    } else {
        T::one()
    }
}

impl<T: Scalar> AttentionParams<T> {
    pub fn exact_basis(bases: &SubspaceBasisSet<T>, epsilon: T, scaled: bool) -> Self {
        let p = bases.subspace_dim();
        Self {
            qkv: bases.stacked_transpose(),
            out: OutProjection::ExactBasis { epsilon },
            heads: bases.num_subspaces(),
            head_dim: p,
            scale: softmax_scale(p, scaled),
        }
    }

    pub fn trainable(
        qkv: Matrix<T>,
        weight: Matrix<T>,
        bias: Option<Matrix<T>>,
        heads: usize,
        scaled: bool,
    ) -> Result<Self> {
        if heads == 0 || !qkv.rows().is_multiple_of(heads) {
            return shape_err(format!("{} qkv rows do not split into {heads} heads", qkv.rows()));
        }
        let head_dim = qkv.rows() / heads;
        let params = Self {
            qkv,
            out: OutProjection::Trainable { weight, bias },
            heads,
            head_dim,
            scale: softmax_scale(head_dim, scaled),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.qkv.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let inner = self.heads * self.head_dim;
        if self.qkv.rows() != inner {
            return shape_err(format!(
                "qkv has {} rows, expected heads·head_dim = {inner}",
                self.qkv.rows()
            ));
        }
        if !(self.scale > T::zero()) {
            return Err(Error::InvalidArgument(format!("softmax scale must be positive, got {}", self.scale)));
        }
        if let OutProjection::Trainable { weight, bias } = &self.out {
            if weight.shape() != (self.dim(), inner) {
                return shape_err(format!(
                    "out-projection is {:?}, expected {:?}",
                    weight.shape(),
                    (self.dim(), inner)
                ));
            }
            if let Some(b) = bias {
                if b.shape() != (self.dim(), 1) {
                    return shape_err(format!("out-projection bias is {:?}", b.shape()));
                }
            }
        }
        Ok(())
    }

    /// `U_k` as a `d×p` matrix.
    pub fn basis(&self, k: usize) -> Matrix<T> {
        self.qkv
            .row_block(k * self.head_dim, self.head_dim)
            .expect("head index in range")
            .transpose()
    }

    pub fn bases(&self) -> Result<SubspaceBasisSet<T>> {
        SubspaceBasisSet::new((0..self.heads).map(|k| self.basis(k)).collect())
    }

    /// The output map used for `n` tokens.
    pub fn out_matrix(&self, n: usize) -> Matrix<T> {
        match &self.out {
            OutProjection::ExactBasis { epsilon } => {
                let beta = RateParams::with_epsilon(*epsilon).beta(self.head_dim, n.max(1));
                self.qkv.transpose().scale(beta)
            }
            OutProjection::Trainable { weight, .. } => weight.clone(),
        }
    }
}

/// `softmax_columns(scale · PᵀP)` with an optional causal mask, where `P` is
/// the `p×n` projected token matrix.
pub fn attention_weights<T: Scalar>(
    proj: &Matrix<T>,
    scale: T,
    mask: Option<CausalConvention>,
) -> Result<Matrix<T>> {
    let scores = proj.t_matmul(proj)?.scale(scale);
    match mask {
        Some(conv) => softmax_columns(&causal_mask(&scores, conv)?),
        None => softmax_columns(&scores),
    }
}

/// One subspace self-attention head; returns a `p×n` matrix.
pub fn ssa<T: Scalar>(
    z: &Matrix<T>,
    basis: &Matrix<T>,
    scale: T,
    mask: Option<CausalConvention>,
) -> Result<Matrix<T>> {
    let proj = basis.t_matmul(z)?;
    let weights = attention_weights(&proj, scale, mask)?;
    proj.matmul(&weights)
}

/// Stacked head outputs, `(pK)×n`.
pub fn mssa_heads<T: Scalar>(
    z: &Matrix<T>,
    params: &AttentionParams<T>,
    mask: Option<CausalConvention>,
) -> Result<Matrix<T>> {
    if z.rows() != params.dim() {
        return shape_err(format!("tokens have {} rows, attention expects {}", z.rows(), params.dim()));
    }
    let p = params.head_dim;
    let mut heads = Vec::with_capacity(params.heads);
    for k in 0..params.heads {
        let proj = params.qkv.row_block(k * p, p)?.matmul(z)?;
        let weights = attention_weights(&proj, params.scale, mask)?;
        heads.push(proj.matmul(&weights)?);
    }
    let refs: Vec<&Matrix<T>> = heads.iter().collect();
    Matrix::vcat(&refs)
}

/// Multi-head subspace self-attention, `d×n → d×n`.
pub fn mssa<T: Scalar>(
    z: &Matrix<T>,
    params: &AttentionParams<T>,
    mask: Option<CausalConvention>,
) -> Result<Matrix<T>> {
    let stacked = mssa_heads(z, params, mask)?;
    let out = params.out_matrix(z.cols()).matmul(&stacked)?;
    match &params.out {
        OutProjection::Trainable { bias: Some(b), .. } => out.add_column_broadcast(b.as_slice()),
        _ => Ok(out),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionVariant {
    /// `Z + MSSA(Z)`
    #[default]
    Skip,
    /// `(1 − βκ)Z + βκ·MSSA(Z)`
    Convex,
}

pub fn compression_step<T: Scalar>(
    z: &Matrix<T>,
    params: &AttentionParams<T>,
    rate: &RateParams<T>,
    variant: CompressionVariant,
    mask: Option<CausalConvention>,
) -> Result<Matrix<T>> {
    let attn = mssa(z, params, mask)?;
    match variant {
        CompressionVariant::Skip => z.add(&attn),
        CompressionVariant::Convex => {
            let bk = rate.beta(params.head_dim, z.cols().max(1)) * rate.kappa;
            let mut out = z.scale(T::one() - bk);
            out.axpy(bk, &attn)?;
            Ok(out)
        }
    }
}

/// Attention parameters living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeAttention<T> {
    pub qkv: Var,
    pub out: TapeOut<T>,
    pub heads: usize,
    pub head_dim: usize,
    pub scale: T,
}

#[derive(Clone, Copy, Debug)]
pub enum TapeOut<T> {
    ExactBasis { epsilon: T },
    Trainable { weight: Var, bias: Option<Var> },
}

/// Multiplies each attention-weight matrix by a fixed keep-mask (already
/// rescaled), one per head.
pub type DropoutMasks<T> = Vec<Matrix<T>>;

/// Tape version of [`mssa`].
pub fn tape_mssa<T: Scalar>(
    tape: &Tape<T>,
    z: Var,
    attn: &TapeAttention<T>,
    mask: Option<CausalConvention>,
    dropout: Option<&DropoutMasks<T>>,
) -> Result<Var> {
    let n = tape.shape(z).1;
    let p = attn.head_dim;
    let mut heads = Vec::with_capacity(attn.heads);
    for k in 0..attn.heads {
        let uk_t = tape.rows(attn.qkv, k * p, p)?;
        let proj = tape.matmul(uk_t, z)?;
        let proj_t = tape.transpose(proj);
        let gram = tape.matmul(proj_t, proj)?;
        let mut scores = tape.scale(gram, attn.scale);
        if let Some(conv) = mask {
            scores = tape.causal_mask(scores, conv)?;
        }
        let mut weights = tape.softmax_columns(scores)?;
        if let Some(masks) = dropout {
            let keep = tape.constant(masks[k].clone());
            weights = tape.mul(weights, keep)?;
        }
        heads.push(tape.matmul(proj, weights)?);
    }
    let stacked = tape.vcat(&heads)?;
    match attn.out {
        TapeOut::ExactBasis { epsilon } => {
            let beta = RateParams::with_epsilon(epsilon).beta(p, n.max(1));
            let w = tape.transpose(attn.qkv);
            let w = tape.scale(w, beta);
            tape.matmul(w, stacked)
        }
        TapeOut::Trainable { weight, bias } => {
            let out = tape.matmul(weight, stacked)?;
            match bias {
                Some(b) => tape.add_column(out, b),
                None => Ok(out),
            }
        }
    }
}
