//! Full encoder (and optional decoder) models with a flat, named parameter list.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::attention::{
    softmax_scale, AttentionParams, DropoutMasks, OutProjection, TapeAttention, TapeOut,
};
use crate::blocks::embed::{classifier_head, pooling_head, preprocess, token_head, EmbeddingParams, HeadParams};
use crate::blocks::ista::DictionaryParams;
use crate::blocks::layer::{
    decoder_layer, encoder_layer_trace, tape_decoder_layer, tape_encoder_layer, DecoderLayerParams,
    EncoderLayerParams, EncoderTrace, TapeDecoderLayer, TapeEncoderLayer, TapeNorm,
};
use crate::blocks::norm::{LayerNormParams, DEFAULT_LN_EPS};
use crate::error::{shape_err, Error, Result};
use crate::numeric::autodiff::{Tape, Var};
use crate::numeric::matrix::Matrix;
use crate::numeric::rng::{normal_matrix, uniform_matrix, RngStream};
use crate::numeric::softmax::CausalConvention;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear head on the class token.
    #[default]
    ClassToken,
    /// Linear head on the mean token; no class token.
    MeanPool,
    /// Encoder, decoder, and a per-token linear map back to patch space.
    Reconstruct,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Output map fixed to `β[U_1, …, U_K]`.
    ExactBasis,
    #[default]
    Trainable,
}

fn yes() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    DEFAULT_LN_EPS
}

fn default_epsilon() -> f64 {
    0.5
}

fn default_step() -> f64 {
    0.1
}

/// Architecture description. Field defaults follow the reference pseudocode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub decoder_layers: usize,
    #[serde(default)]
    pub attention: AttentionMode,
    /// Layer norms around the patch projection.
    #[serde(default = "yes")]
    pub embedding_norms: bool,
    /// Layer norm in front of the classification head.
    #[serde(default = "yes")]
    pub head_norm: bool,
    /// Biases on the linear maps (out-projection, patch projection, decoder
    /// dictionary, head).
    #[serde(default = "yes")]
    pub biases: bool,
    /// Scale attention scores by `p^(−1/2)`.
    #[serde(default = "yes")]
    pub softmax_scale: bool,
    #[serde(default)]
    pub causal: Option<CausalConvention>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_step")]
    pub eta: f64,
    #[serde(default = "default_step")]
    pub lambda: f64,
}

impl ModelSpec {
    /// Image classifier with a class token.
    pub fn classifier(
        layers: usize,
        dim: usize,
        heads: usize,
        head_dim: usize,
        num_patches: usize,
        patch_dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            layers,
            dim,
            heads,
            head_dim,
            num_patches,
            patch_dim,
            num_classes,
            head: HeadKind::ClassToken,
            decoder_layers: 0,
            attention: AttentionMode::Trainable,
            embedding_norms: true,
            head_norm: true,
            biases: true,
            softmax_scale: true,
            causal: None,
            dropout: 0.0,
            ln_eps: DEFAULT_LN_EPS,
            epsilon: default_epsilon(),
            eta: default_step(),
            lambda: default_step(),
        }
    }

    /// Masked autoencoder with a mirrored decoder.
    pub fn autoencoder(
        layers: usize,
        decoder_layers: usize,
        dim: usize,
        heads: usize,
        head_dim: usize,
        num_patches: usize,
        patch_dim: usize,
    ) -> Self {
        Self {
            head: HeadKind::Reconstruct,
            decoder_layers,
            num_classes: 0,
            head_norm: false,
            ..Self::classifier(layers, dim, heads, head_dim, num_patches, patch_dim, 0)
        }
    }

    fn image(layers: usize, dim: usize, heads: usize) -> Self {
        Self::classifier(layers, dim, heads, dim / heads, 196, 16 * 16 * 3, 1000)
    }

    pub fn crate_tiny() -> Self {
        Self::image(12, 384, 6)
    }

    pub fn crate_small() -> Self {
        Self::image(12, 576, 12)
    }

    pub fn crate_base() -> Self {
        Self::image(12, 768, 12)
    }

    pub fn crate_large() -> Self {
        Self::image(24, 1024, 16)
    }

    pub fn has_cls(&self) -> bool {
        self.head == HeadKind::ClassToken
    }

    /// Tokens seen by the encoder.
    pub fn num_tokens(&self) -> usize {
        self.num_patches + usize::from(self.has_cls())
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("num_patches", self.num_patches),
            ("patch_dim", self.patch_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.head != HeadKind::Reconstruct && self.num_classes == 0 {
            return Err(Error::InvalidArgument("classification heads need num_classes > 0".into()));
        }
        if self.head != HeadKind::Reconstruct && self.decoder_layers > 0 {
            return Err(Error::InvalidArgument("decoder layers are only used by reconstruction models".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let rates = [("ln_eps", self.ln_eps), ("epsilon", self.epsilon), ("eta", self.eta)];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        Layout::build(self).slots.iter().map(|s| s.rows * s.cols).sum()
    }

    /// `(name, rows, cols)` for every parameter in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, usize, usize)> {
        Layout::build(self)
            .slots
            .into_iter()
            .map(|s| (s.name, s.rows, s.cols))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Ones,
    Zeros,
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    qkv: usize,
    out_w: Option<usize>,
    out_b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct EncIdx {
    ln1: NormIdx,
    attn: AttnIdx,
    ln2: NormIdx,
    dict: usize,
}

#[derive(Clone, Copy, Debug)]
struct DecIdx {
    ln1: NormIdx,
    e: usize,
    e_bias: Option<usize>,
    ln2: NormIdx,
    attn: AttnIdx,
}

#[derive(Clone, Copy, Debug)]
struct EmbIdx {
    ln_in: Option<NormIdx>,
    w_pre: usize,
    b_pre: Option<usize>,
    ln_out: Option<NormIdx>,
    pos: usize,
    cls: Option<usize>,
    mask_token: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct HeadIdx {
    ln: Option<NormIdx>,
    weight: usize,
    bias: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    slots: Vec<Slot>,
    emb: EmbIdx,
    encoder: Vec<EncIdx>,
    decoder: Vec<DecIdx>,
    head: HeadIdx,
}

struct Builder {
    slots: Vec<Slot>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.slots.push(Slot { name, rows, cols, init });
        self.slots.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), d, 1, Init::Ones),
            bias: self.add(format!("{prefix}.bias"), d, 1, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, spec: &ModelSpec) -> AttnIdx {
        let (d, inner) = (spec.dim, spec.inner_dim());
        let qkv = self.add(format!("{prefix}.qkv"), inner, d, Init::Uniform(fan_in(d)));
        let (out_w, out_b) = match spec.attention {
            AttentionMode::ExactBasis => (None, None),
            AttentionMode::Trainable => {
                let w = self.add(format!("{prefix}.out.weight"), d, inner, Init::Uniform(fan_in(inner)));
                let b = spec
                    .biases
                    .then(|| self.add(format!("{prefix}.out.bias"), d, 1, Init::Uniform(fan_in(inner))));
                (Some(w), b)
            }
        };
        AttnIdx { qkv, out_w, out_b }
    }
}

/// `U(−1/√fan_in, 1/√fan_in)`, the default linear-layer initialization.
fn fan_in(n: usize) -> f64 {
    1.0 / (n as f64).sqrt()
}

impl Layout {
    fn build(spec: &ModelSpec) -> Self {
        let mut b = Builder { slots: Vec::new() };
        let (d, big_d) = (spec.dim, spec.patch_dim);

        let ln_in = spec.embedding_norms.then(|| b.norm("embed.ln_in", big_d));
        let w_pre = b.add("embed.proj.weight".into(), d, big_d, Init::Uniform(fan_in(big_d)));
        let b_pre = spec
            .biases
            .then(|| b.add("embed.proj.bias".into(), d, 1, Init::Uniform(fan_in(big_d))));
        let ln_out = spec.embedding_norms.then(|| b.norm("embed.ln_out", d));
        let pos = b.add("embed.pos".into(), d, spec.num_tokens(), Init::Normal(0.02));
        let cls = spec.has_cls().then(|| b.add("embed.cls".into(), d, 1, Init::Normal(0.02)));
        let mask_token = (spec.head == HeadKind::Reconstruct)
            .then(|| b.add("embed.mask_token".into(), big_d, 1, Init::Normal(0.02)));
        let emb = EmbIdx {
            ln_in,
            w_pre,
            b_pre,
            ln_out,
            pos,
            cls,
            mask_token,
        };

        let encoder = (0..spec.layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncIdx {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    attn: b.attn(&format!("{p}.attn"), spec),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    dict: b.add(format!("{p}.ista.dict"), d, d, Init::Uniform((6.0 / d as f64).sqrt())),
                }
            })
            .collect();

        let decoder = (0..spec.decoder_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                let ln1 = b.norm(&format!("{p}.ln1"), d);
                let e = b.add(format!("{p}.lin.weight"), d, d, Init::Uniform(fan_in(d)));
                let e_bias = spec
                    .biases
                    .then(|| b.add(format!("{p}.lin.bias"), d, 1, Init::Uniform(fan_in(d))));
                DecIdx {
                    ln1,
                    e,
                    e_bias,
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    attn: b.attn(&format!("{p}.attn"), spec),
                }
            })
            .collect();

        let out_dim = match spec.head {
            HeadKind::Reconstruct => big_d,
            _ => spec.num_classes,
        };
        let ln = (spec.head_norm && spec.head != HeadKind::Reconstruct).then(|| b.norm("head.ln", d));
        let weight = b.add("head.weight".into(), out_dim, d, Init::Uniform(fan_in(d)));
        let bias = spec
            .biases
            .then(|| b.add("head.bias".into(), out_dim, 1, Init::Uniform(fan_in(d))));
        let head = HeadIdx { ln, weight, bias };

        Layout {
            slots: b.slots,
            emb,
            encoder,
            decoder,
            head,
        }
    }
}

/// Per-layer intermediate values from a plain forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar> {
    /// Encoder input after pre-processing.
    pub tokens: Matrix<T>,
    pub encoder: Vec<EncoderTrace<T>>,
    /// Decoder output, for reconstruction models.
    pub decoded: Option<Matrix<T>>,
    /// Logits (`C×1`) or reconstruction (`D×N`).
    pub output: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrateModel<T: Scalar> {
    spec: ModelSpec,
    layout_names: Vec<String>,
    params: Vec<Matrix<T>>,
}

impl<T: Scalar> CrateModel<T> {
    /// Fresh model; every tensor draws from its own substream of `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::build(&spec);
        let root = RngStream::new(seed, 0);
        let params = layout
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = root.substream(i as u64).generator();
                match s.init {
                    Init::Ones => Matrix::filled(s.rows, s.cols, T::one()),
                    Init::Zeros => Matrix::zeros(s.rows, s.cols),
                    Init::Uniform(b) => uniform_matrix(s.rows, s.cols, T::lit(b), &mut rng),
                    Init::Normal(std) => normal_matrix(s.rows, s.cols, T::lit(std), &mut rng),
                }
            })
            .collect();
        let layout_names = layout.slots.into_iter().map(|s| s.name).collect();
        Ok(Self {
            spec,
            layout_names,
            params,
        })
    }

    /// Rebuilds a model from tensors in storage order, checking names and shapes.
    pub fn from_named(spec: ModelSpec, named: Vec<(String, Matrix<T>)>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::build(&spec);
        if named.len() != layout.slots.len() {
            return shape_err(format!(
                "expected {} tensors, got {}",
                layout.slots.len(),
                named.len()
            ));
        }
        let mut params = Vec::with_capacity(named.len());
        for (slot, (name, m)) in layout.slots.iter().zip(named) {
            if slot.name != name || m.shape() != (slot.rows, slot.cols) {
                return shape_err(format!(
                    "tensor `{name}` {:?} does not match `{}` {:?}",
                    m.shape(),
                    slot.name,
                    (slot.rows, slot.cols)
                ));
            }
            params.push(m);
        }
        let layout_names = layout.slots.into_iter().map(|s| s.name).collect();
        Ok(Self {
            spec,
            layout_names,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.layout_names
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Matrix<T>> {
        self.layout_names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        let i = self.layout_names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn cast<U: Scalar>(&self) -> CrateModel<U> {
        CrateModel {
            spec: self.spec.clone(),
            layout_names: self.layout_names.clone(),
            params: self.params.iter().map(Matrix::cast).collect(),
        }
    }

    fn layout(&self) -> Layout {
        Layout::build(&self.spec)
    }

    fn norm(&self, idx: NormIdx) -> LayerNormParams<T> {
        LayerNormParams {
            gain: self.params[idx.gain].clone(),
            bias: self.params[idx.bias].clone(),
            eps: T::lit(self.spec.ln_eps),
        }
    }

    fn attention(&self, idx: AttnIdx) -> AttentionParams<T> {
        let out = match idx.out_w {
            Some(w) => OutProjection::Trainable {
                weight: self.params[w].clone(),
                bias: idx.out_b.map(|b| self.params[b].clone()),
            },
            None => OutProjection::ExactBasis {
                epsilon: T::lit(self.spec.epsilon),
            },
        };
        AttentionParams {
            qkv: self.params[idx.qkv].clone(),
            out,
            heads: self.spec.heads,
            head_dim: self.spec.head_dim,
            scale: softmax_scale(self.spec.head_dim, self.spec.softmax_scale),
        }
    }

    pub fn encoder_layer(&self, i: usize) -> EncoderLayerParams<T> {
        let idx = self.layout().encoder[i];
        EncoderLayerParams {
            ln1: self.norm(idx.ln1),
            attn: self.attention(idx.attn),
            ln2: self.norm(idx.ln2),
            dict: DictionaryParams {
                d: self.params[idx.dict].clone(),
                eta: T::lit(self.spec.eta),
                lambda: T::lit(self.spec.lambda),
            },
        }
    }

    pub fn decoder_layer(&self, i: usize) -> DecoderLayerParams<T> {
        let idx = self.layout().decoder[i];
        DecoderLayerParams {
            ln1: self.norm(idx.ln1),
            e: self.params[idx.e].clone(),
            e_bias: idx.e_bias.map(|b| self.params[b].clone()),
            ln2: self.norm(idx.ln2),
            attn: self.attention(idx.attn),
        }
    }

    pub fn embedding(&self) -> EmbeddingParams<T> {
        let idx = self.layout().emb;
        EmbeddingParams {
            ln_in: idx.ln_in.map(|n| self.norm(n)),
            w_pre: self.params[idx.w_pre].clone(),
            b_pre: idx.b_pre.map(|b| self.params[b].clone()),
            ln_out: idx.ln_out.map(|n| self.norm(n)),
            pos: self.params[idx.pos].clone(),
            cls: idx.cls.map(|c| self.params[c].clone()),
            mask_token: idx.mask_token.map(|m| self.params[m].clone()),
        }
    }

    pub fn head(&self) -> HeadParams<T> {
        let idx = self.layout().head;
        HeadParams {
            ln: idx.ln.map(|n| self.norm(n)),
            weight: self.params[idx.weight].clone(),
            bias: idx.bias.map(|b| self.params[b].clone()),
        }
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.shape() != (self.spec.patch_dim, self.spec.num_patches) {
            return shape_err(format!(
                "input is {:?}, model expects {:?}",
                x.shape(),
                (self.spec.patch_dim, self.spec.num_patches)
            ));
        }
        Ok(())
    }

    /// Replaces the columns listed in `omega` with the mask token.
    pub fn mask_input(&self, x: &Matrix<T>, omega: &[usize]) -> Result<Matrix<T>> {
        let emb = self.embedding();
        let token = emb
            .mask_token
            .ok_or_else(|| Error::InvalidArgument("model has no mask token".into()))?;
        mask_columns(x, omega, token.as_slice())
    }

    /// Plain forward pass with every intermediate kept.
    pub fn forward_trace(&self, x: &Matrix<T>, omega: Option<&[usize]>) -> Result<ForwardTrace<T>> {
        self.check_input(x)?;
        let input = match omega {
            Some(o) => self.mask_input(x, o)?,
            None => x.clone(),
        };
        let tokens = preprocess(&input, &self.embedding())?;
        let mut z = tokens.clone();
        let mut encoder = Vec::with_capacity(self.spec.layers);
        for i in 0..self.spec.layers {
            let trace = encoder_layer_trace(&z, &self.encoder_layer(i), self.spec.causal)?;
            z = trace.out.clone();
            encoder.push(trace);
        }
        let head = self.head();
        let (decoded, output) = match self.spec.head {
            HeadKind::ClassToken => (None, Matrix::column_vector(&classifier_head(&z, &head)?)),
            HeadKind::MeanPool => (None, Matrix::column_vector(&pooling_head(&z, &head)?)),
            HeadKind::Reconstruct => {
                for i in 0..self.spec.decoder_layers {
                    z = decoder_layer(&z, &self.decoder_layer(i), self.spec.causal)?;
                }
                let out = token_head(&z, &head)?;
                (Some(z), out)
            }
        };
        Ok(ForwardTrace {
            tokens,
            encoder,
            decoded,
            output,
        })
    }

    pub fn forward(&self, x: &Matrix<T>, omega: Option<&[usize]>) -> Result<Matrix<T>> {
        Ok(self.forward_trace(x, omega)?.output)
    }

    /// Puts every parameter on the tape, as parameters or as constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|m| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect()
    }

    /// Forward pass recorded on a tape. `vars` comes from [`CrateModel::bind`].
    /// Dropout is applied only when `rng` is given and the model's dropout rate is
    /// positive.
    pub fn tape_forward(
        &self,
        tape: &Tape<T>,
        vars: &[Var],
        x: &Matrix<T>,
        omega: Option<&[usize]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_input(x)?;
        let layout = self.layout();
        let spec = &self.spec;
        let eps = T::lit(spec.ln_eps);
        let norm = |idx: NormIdx| TapeNorm {
            gain: vars[idx.gain],
            bias: vars[idx.bias],
            eps,
        };
        let attention = |idx: AttnIdx| TapeAttention {
            qkv: vars[idx.qkv],
            out: match idx.out_w {
                Some(w) => TapeOut::Trainable {
                    weight: vars[w],
                    bias: idx.out_b.map(|b| vars[b]),
                },
                None => TapeOut::ExactBasis {
                    epsilon: T::lit(spec.epsilon),
                },
            },
            heads: spec.heads,
            head_dim: spec.head_dim,
            scale: softmax_scale(spec.head_dim, spec.softmax_scale),
        };

        let emb = layout.emb;
        let mut patches = match omega {
            Some(o) => {
                let token = emb
                    .mask_token
                    .ok_or_else(|| Error::InvalidArgument("model has no mask token".into()))?;
                let keep = mask_columns(x, o, &vec![T::zero(); x.rows()])?;
                let mut indicator = Matrix::zeros(1, x.cols());
                for &j in o {
                    indicator[(0, j)] = T::one();
                }
                let kept = tape.constant(keep);
                let ind = tape.constant(indicator);
                let fill = tape.matmul(vars[token], ind)?;
                tape.add(kept, fill)?
            }
            None => tape.constant(x.clone()),
        };
        if let Some(n) = emb.ln_in {
            patches = norm(n).apply(tape, patches)?;
        }
        patches = tape.matmul(vars[emb.w_pre], patches)?;
        if let Some(b) = emb.b_pre {
            patches = tape.add_column(patches, vars[b])?;
        }
        if let Some(n) = emb.ln_out {
            patches = norm(n).apply(tape, patches)?;
        }
        let tokens = match emb.cls {
            Some(c) => tape.hcat(&[vars[c], patches])?,
            None => patches,
        };
        let mut z = tape.add(tokens, vars[emb.pos])?;

        let n = spec.num_tokens();
        let draw_dropout = |rng: &mut Option<&mut ChaCha8Rng>| -> Option<DropoutMasks<T>> {
            let r = rng.as_mut()?;
            if spec.dropout <= 0.0 {
                return None;
            }
            let keep = 1.0 - spec.dropout;
            Some(
                (0..spec.heads)
                    .map(|_| {
                        Matrix::from_fn(n, n, |_, _| {
                            if r.random::<f64>() < keep {
                                T::lit(1.0 / keep)
                            } else {
                                T::zero()
                            }
                        })
                    })
                    .collect(),
            )
        };

        for idx in &layout.encoder {
            let layer = TapeEncoderLayer {
                ln1: norm(idx.ln1),
                attn: attention(idx.attn),
                ln2: norm(idx.ln2),
                dict: vars[idx.dict],
                eta: T::lit(spec.eta),
                lambda: T::lit(spec.lambda),
            };
            let masks = draw_dropout(&mut rng);
            z = tape_encoder_layer(tape, z, &layer, spec.causal, masks.as_ref())?.out;
        }

        let head = layout.head;
        let feature = match spec.head {
            HeadKind::ClassToken => tape.columns(z, 0, 1)?,
            HeadKind::MeanPool => {
                let ones = tape.constant(Matrix::filled(n, 1, T::one() / T::lit(n as f64)));
                tape.matmul(z, ones)?
            }
            HeadKind::Reconstruct => {
                for idx in &layout.decoder {
                    let layer = TapeDecoderLayer {
                        ln1: norm(idx.ln1),
                        e: vars[idx.e],
                        e_bias: idx.e_bias.map(|b| vars[b]),
                        ln2: norm(idx.ln2),
                        attn: attention(idx.attn),
                    };
                    let masks = draw_dropout(&mut rng);
                    z = tape_decoder_layer(tape, z, &layer, spec.causal, masks.as_ref())?;
                }
                z
            }
        };
        let normed = match head.ln {
            Some(nidx) => norm(nidx).apply(tape, feature)?,
            None => feature,
        };
        let out = tape.matmul(vars[head.weight], normed)?;
        match head.bias {
            Some(b) => tape.add_column(out, vars[b]),
            None => Ok(out),
        }
    }
}

/// Copies `x` with the listed columns replaced by `token`.
pub fn mask_columns<T: Scalar>(x: &Matrix<T>, omega: &[usize], token: &[T]) -> Result<Matrix<T>> {
    if token.len() != x.rows() {
        return shape_err(format!("mask token has {} entries for {}-dim patches", token.len(), x.rows()));
    }
    let mut out = x.clone();
    for &j in omega {
        if j >= x.cols() {
            return Err(Error::InvalidArgument(format!("mask index {j} out of range for {} tokens", x.cols())));
        }
        out.set_column(j, token);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_hand_counts() {
        assert_eq!(ModelSpec::crate_tiny().parameter_count(), 6_090_856);
        assert_eq!(ModelSpec::crate_small().parameter_count(), 13_116_328);
        assert_eq!(ModelSpec::crate_base().parameter_count(), 22_796_008);
        assert_eq!(ModelSpec::crate_large().parameter_count(), 77_641_192);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::classifier(2, 8, 2, 4, 4, 6, 3);
        let a = CrateModel::<f64>::init(spec.clone(), 5).unwrap();
        let b = CrateModel::<f64>::init(spec, 5).unwrap();
        assert_eq!(a, b);
    }
}
