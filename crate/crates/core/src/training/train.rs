//! Training configuration and the mini-batch loop.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::model::{AttentionMode, CrateModel, HeadKind, ModelSpec};
use crate::error::{shape_err, Error, Result};
use crate::numeric::autodiff::Tape;
use crate::numeric::matrix::Matrix;
use crate::numeric::rng::RngStream;
use crate::numeric::softmax::CausalConvention;
use crate::scalar::Scalar;
use crate::training::data::{gmm_classification, mae_tokens, Dataset, SyntheticConfig};
use crate::training::loss::{
    cross_entropy, reconstruction_error, smoothed_targets, tape_cross_entropy, tape_reconstruction_error,
};
use crate::training::optim::{Optimizer, OptimizerConfig};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CRATE_THREADS";

const TRAIN_STREAM: u64 = 0x7472_6169;
const EVAL_STREAM: u64 = 0x6576_616c;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Class-token classification on a labelled dataset file.
    Classify,
    /// Masked reconstruction with an encoder-decoder.
    MaskedAutoencode,
    /// Classification on synthetic union-of-subspaces data.
    GmmClassify,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_mask_ratio() -> f64 {
    0.75
}
fn default_epsilon() -> f64 {
    0.5
}
fn default_step() -> f64 {
    0.1
}
fn default_data_samples() -> usize {
    256
}
fn default_data_subspace_dim() -> usize {
    2
}
fn default_data_noise() -> f64 {
    0.1
}
fn default_token_spread() -> f64 {
    0.1
}

/// Flat training configuration, read from JSON. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,

    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
    #[serde(default)]
    pub num_classes: usize,
    /// Decoder depth for masked autoencoding; defaults to `layers`.
    #[serde(default)]
    pub decoder_layers: Option<usize>,
    #[serde(default)]
    pub attention: AttentionMode,
    #[serde(default)]
    pub causal: Option<CausalConvention>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_step")]
    pub eta: f64,
    #[serde(default = "default_step")]
    pub lambda: f64,

    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,

    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many optimizer steps, even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Reconstruction error on masked columns only.
    #[serde(default)]
    pub masked_only_loss: bool,
    #[serde(default)]
    pub precision: Precision,

    /// Synthetic data, used when no dataset file is given.
    #[serde(default = "default_data_samples")]
    pub data_samples: usize,
    /// Number of data subspaces; defaults to `num_classes` (classification)
    /// or `heads` (autoencoding).
    #[serde(default)]
    pub data_subspaces: Option<usize>,
    #[serde(default = "default_data_subspace_dim")]
    pub data_subspace_dim: usize,
    #[serde(default = "default_data_noise")]
    pub data_noise: f64,
    #[serde(default = "default_token_spread")]
    pub data_token_spread: f64,
}

impl TrainConfig {
    /// Small defaults for a given task; callers adjust fields as needed.
    pub fn toy(task: Task) -> Self {
        Self {
            task,
            layers: 2,
            dim: 16,
            heads: 2,
            head_dim: 8,
            num_patches: 8,
            patch_dim: 16,
            num_classes: if task == Task::MaskedAutoencode { 0 } else { 4 },
            decoder_layers: None,
            attention: AttentionMode::Trainable,
            causal: None,
            dropout: 0.0,
            epsilon: default_epsilon(),
            eta: default_step(),
            lambda: default_step(),
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            weight_decay: 0.0,
            epochs: 1,
            batch_size: 8,
            max_steps: None,
            seed: 0,
            mask_ratio: default_mask_ratio(),
            label_smoothing: 0.0,
            masked_only_loss: false,
            precision: Precision::F64,
            data_samples: default_data_samples(),
            data_subspaces: None,
            data_subspace_dim: default_data_subspace_dim(),
            data_noise: default_data_noise(),
            data_token_spread: default_token_spread(),
        }
    }

    pub fn is_classification(&self) -> bool {
        self.task != Task::MaskedAutoencode
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = if self.is_classification() {
            ModelSpec::classifier(
                self.layers,
                self.dim,
                self.heads,
                self.head_dim,
                self.num_patches,
                self.patch_dim,
                self.num_classes,
            )
        } else {
            ModelSpec::autoencoder(
                self.layers,
                self.decoder_layers.unwrap_or(self.layers),
                self.dim,
                self.heads,
                self.head_dim,
                self.num_patches,
                self.patch_dim,
            )
        };
        spec.attention = self.attention;
        spec.causal = self.causal;
        spec.dropout = self.dropout;
        spec.epsilon = self.epsilon;
        spec.eta = self.eta;
        spec.lambda = self.lambda;
        spec
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::Sgd {
                lr: self.lr,
                momentum: self.momentum,
            },
            OptimizerKind::Adam => OptimizerConfig::Adam {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        self.model_spec().validate()?;
        self.optimizer_config().validate()?;
        if self.layers == 0 {
            return bad("layers must be positive".into());
        }
        if self.is_classification() && self.num_classes == 0 {
            return bad("classification needs num_classes > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    fn synthetic(&self) -> SyntheticConfig {
        let default_subspaces = if self.is_classification() {
            self.num_classes
        } else {
            self.heads
        };
        SyntheticConfig {
            samples: self.data_samples,
            subspaces: self.data_subspaces.unwrap_or(default_subspaces),
            subspace_dim: self.data_subspace_dim,
            patch_dim: self.patch_dim,
            num_patches: self.num_patches,
            noise: self.data_noise,
            token_spread: self.data_token_spread,
            seed: self.seed,
        }
    }

    /// The dataset a run uses when no file is given.
    pub fn synthetic_dataset(&self) -> Result<Dataset> {
        match self.task {
            Task::Classify => Err(Error::InvalidArgument(
                "task `classify` needs a dataset file".into(),
            )),
            Task::GmmClassify => gmm_classification(&SyntheticConfig {
                subspaces: self.num_classes,
                ..self.synthetic()
            }),
            Task::MaskedAutoencode => mae_tokens(&self.synthetic()),
        }
    }

    /// Checks that `data` fits the configured model and task.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if (data.patch_dim(), data.num_patches()) != (self.patch_dim, self.num_patches) {
            return shape_err(format!(
                "dataset samples are {}×{}, config expects {}×{}",
                data.patch_dim(),
                data.num_patches(),
                self.patch_dim,
                self.num_patches
            ));
        }
        if self.is_classification() {
            let labels = data
                .labels()
                .ok_or_else(|| Error::InvalidArgument("classification needs a labelled dataset".into()))?;
            if let Some(&l) = labels.iter().find(|&&l| l as usize >= self.num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Mean batch loss at every optimizer step, before the update.
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub model: CrateModel<T>,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub loss: f64,
    /// Top-1 accuracy, for classification.
    pub accuracy: Option<f64>,
}

/// Thread count from `CRATE_THREADS`; `None` lets rayon decide.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) if s.trim().is_empty() => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::InvalidArgument(format!("{THREADS_ENV}={s} is not a positive integer"))),
            Ok(n) => Ok(Some(n)),
        },
    }
}

/// Runs `f` on a pool sized by [`thread_cap`].
pub fn with_thread_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// `⌊ratio·n⌋` distinct column indices, sorted.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    let count = ((ratio * n as f64).floor() as usize).min(n);
    let mut idx = index::sample(rng, n, count).into_vec();
    idx.sort_unstable();
    idx
}

/// What one sample contributes to the loss.
enum Target<'a, T> {
    Class(&'a [T]),
    Mask(&'a [usize]),
}

fn sample_loss_and_grad<T: Scalar>(
    model: &CrateModel<T>,
    x: &Matrix<T>,
    target: Target<'_, T>,
    masked_only: bool,
    dropout_stream: RngStream,
) -> Result<(T, Vec<Matrix<T>>)> {
    let tape = Tape::new();
    let vars = model.bind(&tape, true);
    let mut rng = dropout_stream.generator();
    let loss = match target {
        Target::Class(t) => {
            let logits = model.tape_forward(&tape, &vars, x, None, Some(&mut rng))?;
            tape_cross_entropy(&tape, logits, t)?
        }
        Target::Mask(omega) => {
            let recon = model.tape_forward(&tape, &vars, x, Some(omega), Some(&mut rng))?;
            tape_reconstruction_error(&tape, recon, x, omega, masked_only)?
        }
    };
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
}

fn check_finite(value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::DivergedLoss { step, value })
    }
}

/// Trains a freshly initialised model on `data`. Deterministic for a fixed
/// seed: per-sample gradients are computed in parallel and summed in batch
/// order.
pub fn train<T: Scalar>(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    cfg.check_dataset(data)?;
    let model = CrateModel::<T>::init(cfg.model_spec(), cfg.seed)?;
    train_from(cfg, data, model)
}

/// Continues training `model`.
pub fn train_from<T: Scalar>(cfg: &TrainConfig, data: &Dataset, mut model: CrateModel<T>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    cfg.check_dataset(data)?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        return Ok(TrainOutcome { model, log });
    }
    let samples: Vec<Matrix<T>> = data.samples().iter().map(Matrix::cast).collect();
    let targets: Option<Vec<Vec<T>>> = match (cfg.is_classification(), data.labels()) {
        (true, Some(labels)) => Some(
            labels
                .iter()
                .map(|&l| smoothed_targets(l as usize, cfg.num_classes, T::lit(cfg.label_smoothing)))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    let mut opt = Optimizer::new(cfg.optimizer_config(), model.params())?;
    let root = RngStream::new(cfg.seed, TRAIN_STREAM);
    let n = model.spec().num_patches;
    let mut step = 0usize;

    with_thread_pool(|| -> Result<()> {
        'epochs: for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut root.substream(epoch as u64).generator());
            let mut epoch_losses = Vec::new();
            for batch in order.chunks(cfg.batch_size) {
                if cfg.max_steps.is_some_and(|m| step >= m) {
                    break;
                }
                let step_stream = root.substream(u64::MAX - step as u64);
                let results: Vec<(T, Vec<Matrix<T>>)> = batch
                    .par_iter()
                    .enumerate()
                    .map(|(b, &i)| {
                        let stream = step_stream.substream(b as u64);
                        let target = match &targets {
                            Some(t) => Target::Class(&t[i]),
                            None => {
                                let omega = sample_mask(n, cfg.mask_ratio, &mut stream.substream(0).generator());
                                return sample_loss_and_grad(
                                    &model,
                                    &samples[i],
                                    Target::Mask(&omega),
                                    cfg.masked_only_loss,
                                    stream.substream(1),
                                );
                            }
                        };
                        sample_loss_and_grad(&model, &samples[i], target, cfg.masked_only_loss, stream.substream(1))
                    })
                    .collect::<Result<_>>()?;
                let inv = T::one() / T::lit(batch.len() as f64);
                let mut loss = T::zero();
                let mut grads: Vec<Matrix<T>> = model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
                for (l, g) in &results {
                    loss += *l;
                    for (acc, gi) in grads.iter_mut().zip(g) {
                        acc.axpy(inv, gi)?;
                    }
                }
                let loss = (loss * inv).to_f64_lossy();
                check_finite(loss, step)?;
                opt.step(model.params_mut(), &grads)?;
                if !model.params().iter().all(Matrix::is_finite) {
                    return Err(Error::DivergedLoss { step: step + 1, value: f64::INFINITY });
                }
                log.step_losses.push(loss);
                epoch_losses.push(loss);
                step += 1;
            }
            if epoch_losses.is_empty() {
                break 'epochs;
            }
            log.epochs.push(EpochRecord {
                epoch,
                steps: epoch_losses.len(),
                mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
            });
        }
        Ok(())
    })??;
    Ok(TrainOutcome { model, log })
}

/// Trains at the configured precision and returns a 64-bit model.
pub fn train_any(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome<f64>> {
    match cfg.precision {
        Precision::F64 => train::<f64>(cfg, data),
        Precision::F32 => {
            let out = train::<f32>(cfg, data)?;
            Ok(TrainOutcome {
                model: out.model.cast(),
                log: out.log,
            })
        }
    }
}

/// Mask set used for sample `i` during evaluation with `seed`.
pub fn eval_mask(seed: u64, i: usize, n: usize, ratio: f64) -> Vec<usize> {
    let stream = RngStream::new(seed, EVAL_STREAM).substream(i as u64);
    sample_mask(n, ratio, &mut stream.generator())
}

/// Mean loss (and accuracy for classifiers) of `model` over `data`, without
/// dropout. Autoencoders are scored with masks drawn from `seed`.
pub fn evaluate<T: Scalar>(
    model: &CrateModel<T>,
    data: &Dataset,
    mask_ratio: f64,
    label_smoothing: f64,
    masked_only: bool,
    seed: u64,
) -> Result<EvalMetrics> {
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
    let classify = spec.head != HeadKind::Reconstruct;
    let labels = match (classify, data.labels()) {
        (true, Some(l)) => Some(l),
        (true, None) => return Err(Error::InvalidArgument("classification needs a labelled dataset".into())),
        (false, _) => None,
    };
    let per_sample: Vec<(f64, bool)> = with_thread_pool(|| {
        (0..data.len())
            .into_par_iter()
            .map(|i| {
                let x: Matrix<T> = data.sample(i).cast();
                match labels {
                    Some(labels) => {
                        let label = labels[i] as usize;
                        let logits = model.forward(&x, None)?;
                        let target = smoothed_targets(label, spec.num_classes, T::lit(label_smoothing))?;
                        let loss = cross_entropy(&target, logits.as_slice())?;
                        let pred = argmax(logits.as_slice());
                        Ok((loss.to_f64_lossy(), pred == label))
                    }
                    None => {
                        let omega = eval_mask(seed, i, spec.num_patches, mask_ratio);
                        let recon = model.forward(&x, Some(&omega))?;
                        let err = reconstruction_error(&recon, &x, &omega, masked_only)?;
                        Ok((err.to_f64_lossy(), false))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let count = per_sample.len() as f64;
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / count;
    let accuracy = labels.map(|_| per_sample.iter().filter(|(_, ok)| *ok).count() as f64 / count);
    Ok(EvalMetrics {
        samples: per_sample.len(),
        loss,
        accuracy,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
