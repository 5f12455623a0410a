//! Encoder and decoder layer wiring.
//!
//! The encoder residual adds the normalized input `ln1(Z)`, not `Z` itself.

use serde::{Deserialize, Serialize};

use crate::blocks::attention::{mssa, tape_mssa, AttentionParams, DropoutMasks, TapeAttention};
use crate::blocks::ista::{ista_step, tape_ista, DictionaryParams};
use crate::blocks::norm::{layer_norm, LayerNormParams};
use crate::error::{shape_err, Result};
use crate::numeric::autodiff::{Tape, Var};
use crate::numeric::matrix::Matrix;
use crate::numeric::softmax::CausalConvention;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct EncoderLayerParams<T: Scalar> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub dict: DictionaryParams<T>,
}

/// Intermediate values of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrace<T: Scalar> {
    /// `ln1(Z)`, the attention input.
    pub normed: Matrix<T>,
    /// `mssa(ln1(Z)) + ln1(Z)`.
    pub half: Matrix<T>,
    pub out: Matrix<T>,
}

pub fn encoder_layer_trace<T: Scalar>(
    z: &Matrix<T>,
    layer: &EncoderLayerParams<T>,
    mask: Option<CausalConvention>,
) -> Result<EncoderTrace<T>> {
    let normed = layer_norm(z, &layer.ln1)?;
    let half = mssa(&normed, &layer.attn, mask)?.add(&normed)?;
    let out = ista_step(&layer_norm(&half, &layer.ln2)?, &layer.dict)?;
    Ok(EncoderTrace { normed, half, out })
}

pub fn encoder_layer<T: Scalar>(
    z: &Matrix<T>,
    layer: &EncoderLayerParams<T>,
    mask: Option<CausalConvention>,
) -> Result<Matrix<T>> {
    Ok(encoder_layer_trace(z, layer, mask)?.out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct DecoderLayerParams<T: Scalar> {
    pub ln1: LayerNormParams<T>,
    /// `d×d` synthesis dictionary.
    pub e: Matrix<T>,
    pub e_bias: Option<Matrix<T>>,
    pub ln2: LayerNormParams<T>,
    /// Attention over the anti-compression bases `V`.
    pub attn: AttentionParams<T>,
}

/// `ln2(E·ln1(Z)) − mssa(ln2(E·ln1(Z)) | V)`.
pub fn decoder_layer<T: Scalar>(
    z: &Matrix<T>,
    layer: &DecoderLayerParams<T>,
    mask: Option<CausalConvention>,
) -> Result<Matrix<T>> {
    if layer.e.shape() != (z.rows(), z.rows()) {
        return shape_err(format!("synthesis dictionary is {:?} for {}-dim tokens", layer.e.shape(), z.rows()));
    }
    let mut half = layer.e.matmul(&layer_norm(z, &layer.ln1)?)?;
    if let Some(b) = &layer.e_bias {
        half = half.add_column_broadcast(b.as_slice())?;
    }
    let normed = layer_norm(&half, &layer.ln2)?;
    normed.sub(&mssa(&normed, &layer.attn, mask)?)
}

/// Layer-norm parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeNorm<T> {
    pub gain: Var,
    pub bias: Var,
    pub eps: T,
}

impl<T: Scalar> TapeNorm<T> {
    pub fn apply(&self, tape: &Tape<T>, z: Var) -> Result<Var> {
        tape.layer_norm(z, self.gain, self.bias, self.eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TapeEncoderLayer<T> {
    pub ln1: TapeNorm<T>,
    pub attn: TapeAttention<T>,
    pub ln2: TapeNorm<T>,
    pub dict: Var,
    pub eta: T,
    pub lambda: T,
}

/// Tape nodes of one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct TapeEncoderTrace {
    pub normed: Var,
    pub half: Var,
    pub out: Var,
}

pub fn tape_encoder_layer<T: Scalar>(
    tape: &Tape<T>,
    z: Var,
    layer: &TapeEncoderLayer<T>,
    mask: Option<CausalConvention>,
    dropout: Option<&DropoutMasks<T>>,
) -> Result<TapeEncoderTrace> {
    let normed = layer.ln1.apply(tape, z)?;
    let attn = tape_mssa(tape, normed, &layer.attn, mask, dropout)?;
    let half = tape.add(attn, normed)?;
    let pre = layer.ln2.apply(tape, half)?;
    let out = tape_ista(tape, pre, layer.dict, layer.eta, layer.lambda)?;
    Ok(TapeEncoderTrace { normed, half, out })
}

#[derive(Clone, Copy, Debug)]
pub struct TapeDecoderLayer<T> {
    pub ln1: TapeNorm<T>,
    pub e: Var,
    pub e_bias: Option<Var>,
    pub ln2: TapeNorm<T>,
    pub attn: TapeAttention<T>,
}

pub fn tape_decoder_layer<T: Scalar>(
    tape: &Tape<T>,
    z: Var,
    layer: &TapeDecoderLayer<T>,
    mask: Option<CausalConvention>,
    dropout: Option<&DropoutMasks<T>>,
) -> Result<Var> {
    let normed_in = layer.ln1.apply(tape, z)?;
    let mut half = tape.matmul(layer.e, normed_in)?;
    if let Some(b) = layer.e_bias {
        half = tape.add_column(half, b)?;
    }
    let normed = layer.ln2.apply(tape, half)?;
    let attn = tape_mssa(tape, normed, &layer.attn, mask, dropout)?;
    tape.sub(normed, attn)
}
