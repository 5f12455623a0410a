//! Layer-wise compression and sparsity curves, class-token attention maps,
//! and subspace coherence.

pub mod gradcheck;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::model::CrateModel;
use crate::error::{shape_err, Error, Result};
use crate::numeric::matrix::Matrix;
use crate::numeric::softmax::softmax;
use crate::rate::{coding_rate_subspaces, sparsity_metrics, RateParams};
use crate::scalar::Scalar;
use crate::training::data::Dataset;

/// Default number of samples averaged by [`layer_metrics`].
pub const DEFAULT_METRIC_SAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetricsRow {
    pub layer_index: usize,
    /// `R^c(Z^{ℓ+1/2} | U^ℓ)` on the attention output.
    pub rc_after_attention: f64,
    /// `‖Z^{ℓ+1}‖₀ / (d·n)` on the ISTA output.
    pub sparsity_l0_fraction: f64,
    /// `‖Z^{ℓ+1}‖₁` on the ISTA output.
    pub l1_norm: f64,
}

/// Per-layer metrics averaged over the first `samples` inputs of `data`
/// (clamped to the dataset size). The coding rate uses the model's `ε`.
pub fn layer_metrics<T: Scalar>(model: &CrateModel<T>, data: &Dataset, samples: usize) -> Result<Vec<LayerMetricsRow>> {
    let spec = model.spec();
    if (data.patch_dim(), data.num_patches()) != (spec.patch_dim, spec.num_patches) {
        return shape_err(format!(
            "dataset samples are {}×{}, model expects {}×{}",
            data.patch_dim(),
            data.num_patches(),
            spec.patch_dim,
            spec.num_patches
        ));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("layer metrics need at least one sample".into()));
    }
    let count = samples.min(data.len());
    let bases = (0..spec.layers)
        .map(|i| model.encoder_layer(i).attn.bases())
        .collect::<Result<Vec<_>>>()?;
    let rate = RateParams::with_epsilon(T::lit(spec.epsilon));
    let per_sample: Vec<Vec<[f64; 3]>> = (0..count)
        .into_par_iter()
        .map(|s| {
            let trace = model.forward_trace(&data.sample(s).cast(), None)?;
            trace
                .encoder
                .iter()
                .zip(&bases)
                .map(|(layer, u)| {
                    let rc = coding_rate_subspaces(&layer.half, u, &rate)?.to_f64_lossy();
                    let sp = sparsity_metrics(&layer.out);
                    Ok([rc, sp.l0_fraction, sp.l1])
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / count as f64;
    Ok((0..spec.layers)
        .map(|l| {
            let mut acc = [0.0; 3];
            for sample in &per_sample {
                for (a, v) in acc.iter_mut().zip(sample[l]) {
                    *a += v;
                }
            }
            LayerMetricsRow {
                layer_index: l,
                rc_after_attention: acc[0] * inv,
                sparsity_l0_fraction: acc[1] * inv,
                l1_norm: acc[2] * inv,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMapRecord {
    pub layer: usize,
    pub head: usize,
    /// `[rows, cols]` when the patch count is a perfect square.
    pub grid: Option<[usize; 2]>,
    /// Softmax weights of the patch tokens against the class token.
    pub values: Vec<f64>,
}

/// `softmax_i ⟨U_kᵀz_i, U_kᵀz_0⟩` over the patch tokens `i ≥ 1`, where
/// column 0 is the class token. `basis` is `d×p`.
pub fn class_token_attention<T: Scalar>(tokens: &Matrix<T>, basis: &Matrix<T>) -> Result<Vec<T>> {
    if tokens.cols() < 2 {
        return shape_err(format!("need a class token and at least one patch, got {} tokens", tokens.cols()));
    }
    let proj = basis.t_matmul(tokens)?;
    let cls = proj.column(0);
    let scores: Vec<T> = (1..tokens.cols())
        .map(|i| (0..proj.rows()).map(|r| proj[(r, i)] * cls[r]).sum())
        .collect();
    Ok(softmax(&scores))
}

/// Attention map of `head` in encoder layer `layer` for one input. The
/// scores are computed on `ln1(Z^ℓ)`, the tensor the attention block sees.
pub fn attention_map<T: Scalar>(
    model: &CrateModel<T>,
    x: &Matrix<T>,
    layer: usize,
    head: usize,
) -> Result<AttentionMapRecord> {
    let spec = model.spec();
    if !spec.has_cls() {
        return Err(Error::InvalidArgument("attention maps need a class-token model".into()));
    }
    if layer >= spec.layers {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range (model has {})", spec.layers)));
    }
    if head >= spec.heads {
        return Err(Error::InvalidArgument(format!("head {head} out of range (model has {})", spec.heads)));
    }
    let trace = model.forward_trace(x, None)?;
    let basis = model.encoder_layer(layer).attn.basis(head);
    let values = class_token_attention(&trace.encoder[layer].normed, &basis)?
        .into_iter()
        .map(Scalar::to_f64_lossy)
        .collect();
    let n = spec.num_patches;
    let side = (n as f64).sqrt().round() as usize;
    Ok(AttentionMapRecord {
        layer,
        head,
        grid: (side * side == n).then_some([side, side]),
        values,
    })
}

/// Gram matrix of the stacked basis columns after scaling each column to
/// unit length. Zero columns stay zero.
pub fn coherence<T: Scalar>(bases: &[Matrix<T>]) -> Result<Matrix<T>> {
    let refs: Vec<&Matrix<T>> = bases.iter().collect();
    let mut stacked = Matrix::hcat(&refs)?;
    for c in 0..stacked.cols() {
        let col = stacked.column(c);
        let norm = col.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if norm > T::zero() {
            let scaled: Vec<T> = col.iter().map(|v| *v / norm).collect();
            stacked.set_column(c, &scaled);
        }
    }
    stacked.t_matmul(&stacked)
}

/// [`coherence`] of encoder layer `layer`'s attention bases.
pub fn layer_coherence<T: Scalar>(model: &CrateModel<T>, layer: usize) -> Result<Matrix<T>> {
    if layer >= model.spec().layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range (model has {})",
            model.spec().layers
        )));
    }
    let attn = model.encoder_layer(layer).attn;
    let bases: Vec<Matrix<T>> = (0..attn.heads).map(|k| attn.basis(k)).collect();
    coherence(&bases)
}
