//! Low-dimensional Gaussian-mixture token model: sampling, density, score,
//! Tweedie denoising, and the compression-versus-denoising experiment.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::attention::{compression_step, AttentionParams, CompressionVariant};
use crate::error::{shape_err, Error, Result};
use crate::numeric::decomp::{cholesky_posdef, cholesky_solve, logdet_from_cholesky, sym_apply};
use crate::numeric::matrix::{dot, norm2, Matrix};
use crate::numeric::rng::{standard_normal, RngStream};
use crate::numeric::softmax::{log_sum_exp, softmax};
use crate::rate::{grad_rc_exact, RateParams, SubspaceBasisSet};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    /// Noise covariance `σ²I`.
    PerCoordinate,
    /// Noise covariance `(σ²/d)I`.
    #[default]
    Normalized,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
#[serde(rename_all = "snake_case")]
pub enum CoeffCovariance<T> {
    /// Diagonal `Λ` with the given entries.
    Diagonal(Vec<T>),
    /// `(1/p) I`.
    #[default]
    Isotropic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct GmmTokenModel<T: Scalar> {
    pub bases: SubspaceBasisSet<T>,
    pub coeff: CoeffCovariance<T>,
    pub mixture: Vec<T>,
    pub sigma: T,
    pub noise: NoiseConvention,
}

impl<T: Scalar> GmmTokenModel<T> {
    pub fn new(
        bases: SubspaceBasisSet<T>,
        coeff: CoeffCovariance<T>,
        mixture: Vec<T>,
        sigma: T,
        noise: NoiseConvention,
    ) -> Result<Self> {
        let model = Self {
            bases,
            coeff,
            mixture,
            sigma,
            noise,
        };
        model.validate()?;
        Ok(model)
    }

    /// Uniform mixture, isotropic coefficients, normalized noise.
    pub fn isotropic(bases: SubspaceBasisSet<T>, sigma: T) -> Result<Self> {
        let k = bases.num_subspaces();
        let w = T::one() / T::lit(k as f64);
        Self::new(bases, CoeffCovariance::Isotropic, vec![w; k], sigma, NoiseConvention::Normalized)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.bases.num_subspaces();
        if self.mixture.len() != k {
            return shape_err(format!("{} mixture weights for {k} components", self.mixture.len()));
        }
        if self.mixture.iter().any(|w| !(*w >= T::zero())) {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
        }
        let total: T = self.mixture.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}")));
        }
        if let CoeffCovariance::Diagonal(lambda) = &self.coeff {
            if lambda.len() != self.bases.subspace_dim() {
                return shape_err(format!(
                    "{} coefficient variances for p = {}",
                    lambda.len(),
                    self.bases.subspace_dim()
                ));
            }
            if lambda.iter().any(|l| !(*l >= T::zero())) {
                return Err(Error::InvalidArgument("coefficient variances must be nonnegative".into()));
            }
        }
        if !(self.sigma >= T::zero()) {
            return Err(Error::InvalidArgument(format!("noise level must be nonnegative, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bases.ambient_dim()
    }

    /// Per-coordinate noise variance under the active convention.
    pub fn noise_variance(&self) -> T {
        let s2 = self.sigma * self.sigma;
        match self.noise {
            NoiseConvention::PerCoordinate => s2,
            NoiseConvention::Normalized => s2 / T::lit(self.dim() as f64),
        }
    }

    fn coeff_variances(&self) -> Vec<T> {
        match &self.coeff {
            CoeffCovariance::Diagonal(l) => l.clone(),
            CoeffCovariance::Isotropic => {
                let p = self.bases.subspace_dim();
                vec![T::one() / T::lit(p as f64); p]
            }
        }
    }

    /// Signal covariance `U_k Λ U_kᵀ` of component `k`.
    pub fn signal_covariance(&self, k: usize) -> Matrix<T> {
        let u = self.bases.basis(k);
        let lam = self.coeff_variances();
        let scaled = Matrix::from_fn(u.rows(), u.cols(), |r, c| u[(r, c)] * lam[c]);
        scaled.matmul_t(u).expect("basis shapes agree").symmetrize()
    }

    /// `U_k Λ U_kᵀ + σ_eff² I`.
    pub fn noisy_covariance(&self, k: usize) -> Matrix<T> {
        let mut c = self.signal_covariance(k);
        let s2 = self.noise_variance();
        for i in 0..c.rows() {
            c[(i, i)] += s2;
        }
        c
    }

    fn require_noise(&self) -> Result<()> {
        if !(self.sigma > T::zero()) {
            return Err(Error::InvalidArgument("the noisy density needs sigma > 0".into()));
        }
        Ok(())
    }

    fn check_point(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return shape_err(format!("point has {} coordinates, model lives in {}", x.len(), self.dim()));
        }
        Ok(())
    }
}

/// Draws `n` tokens and their component labels.
pub fn sample_tokens<T: Scalar>(model: &GmmTokenModel<T>, n: usize, stream: &RngStream) -> Result<(Matrix<T>, Vec<usize>)> {
    model.validate()?;
    let mut rng = stream.generator();
    let d = model.dim();
    let lam = model.coeff_variances();
    let noise_std = model.noise_variance().sqrt();
    let cumulative: Vec<f64> = model
        .mixture
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w.to_f64_lossy();
            Some(*acc)
        })
        .collect();
    let mut z = Matrix::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random::<f64>() * cumulative.last().copied().unwrap_or(1.0);
        let s = cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1);
        labels.push(s);
        let basis = model.bases.basis(s);
        let coeffs: Vec<T> = lam
            .iter()
            .map(|&l| standard_normal::<T, _>(&mut rng) * l.sqrt())
            .collect();
        for r in 0..d {
            let signal: T = (0..coeffs.len()).map(|c| basis[(r, c)] * coeffs[c]).sum();
            z[(r, i)] = signal + standard_normal::<T, _>(&mut rng) * noise_std;
        }
    }
    Ok((z, labels))
}

struct ComponentTerms<T> {
    /// `log π_k − ½ log det C_k − ½ xᵀC_k⁻¹x` per component.
    log_weights: Vec<T>,
    /// `C_k⁻¹ x` per component.
    solved: Vec<Vec<T>>,
}

/// `(log det C_k, C_k⁻¹x)` through the low-rank form `C_k = s²I + BBᵀ`,
/// `B = U_kΛ^(1/2)`, which stays well conditioned for tiny `s`.
fn noisy_solve<T: Scalar>(model: &GmmTokenModel<T>, k: usize, x: &[T]) -> Result<(T, Vec<T>)> {
    let s2 = model.noise_variance();
    let u = model.bases.basis(k);
    let lam = model.coeff_variances();
    let b = Matrix::from_fn(u.rows(), u.cols(), |r, c| u[(r, c)] * lam[c].sqrt());
    let mut small = b.t_matmul(&b)?;
    for i in 0..small.rows() {
        small[(i, i)] += s2;
    }
    let l = cholesky_posdef(&small.symmetrize())?;
    let bx = b.t_matmul(&Matrix::column_vector(x))?;
    let inner = b.matmul(&cholesky_solve(&l, &bx)?)?.into_vec();
    let solved = x.iter().zip(inner).map(|(xi, v)| (*xi - v) / s2).collect();
    let d = T::lit(x.len() as f64);
    let p = T::lit(b.cols() as f64);
    Ok(((d - p) * s2.ln() + logdet_from_cholesky(&l), solved))
}

fn component_terms<T: Scalar>(x: &[T], model: &GmmTokenModel<T>) -> Result<ComponentTerms<T>> {
    model.require_noise()?;
    model.check_point(x)?;
    let mut log_weights = Vec::with_capacity(model.mixture.len());
    let mut solved = Vec::with_capacity(model.mixture.len());
    for (k, &pi) in model.mixture.iter().enumerate() {
        let (logdet, s) = noisy_solve(model, k, x)?;
        let quad = dot(x, &s);
        log_weights.push(pi.ln() - T::lit(0.5) * logdet - T::lit(0.5) * quad);
        solved.push(s);
    }
    Ok(ComponentTerms { log_weights, solved })
}

/// `log Σ_k π_k N(x; 0, U_kΛU_kᵀ + σ_eff² I)`.
pub fn gmm_log_density<T: Scalar>(x: &[T], model: &GmmTokenModel<T>) -> Result<T> {
    let terms = component_terms(x, model)?;
    let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    Ok(log_sum_exp(&terms.log_weights) - T::lit(x.len() as f64) * half_log_2pi)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreForm {
    /// Posterior-weighted precisions with weights from the full component
    /// likelihoods.
    #[default]
    General,
    /// Weights `softmax(−½‖M_kᵀx‖²)` with `M_k = C_k^(−1/2)`; valid only when
    /// `π_k det M_k` is the same for every component.
    Normalized,
}

/// `∇ log q(x)`.
pub fn gmm_score<T: Scalar>(x: &[T], model: &GmmTokenModel<T>, form: ScoreForm) -> Result<Vec<T>> {
    match form {
        ScoreForm::General => {
            let terms = component_terms(x, model)?;
            let w = softmax(&terms.log_weights);
            Ok((0..x.len())
                .map(|i| -w.iter().zip(&terms.solved).map(|(wk, s)| *wk * s[i]).sum::<T>())
                .collect())
        }
        ScoreForm::Normalized => normalized_score(x, model),
    }
}

fn normalized_score<T: Scalar>(x: &[T], model: &GmmTokenModel<T>) -> Result<Vec<T>> {
    model.require_noise()?;
    model.check_point(x)?;
    let xm = Matrix::column_vector(x);
    let floor = T::lit(1e-12);
    let mut log_norms = Vec::new();
    let mut exps = Vec::new();
    let mut precisions = Vec::new();
    for (k, &pi) in model.mixture.iter().enumerate() {
        let cov = model.noisy_covariance(k);
        // M_k = C_k^(−1/2); M_k M_kᵀ = C_k⁻¹.
        let m = sym_apply(&cov, |v| T::one() / v.max(floor).sqrt())?;
        let logdet_m = -T::lit(0.5) * sym_apply(&cov, |v| v.max(floor).ln())?.trace();
        log_norms.push(pi.ln() + logdet_m);
        let mx = m.t_matmul(&xm)?.into_vec();
        exps.push(-T::lit(0.5) * dot(&mx, &mx));
        precisions.push(m.matmul_t(&m)?);
    }
    let spread = log_norms.iter().fold(T::zero(), |acc, v| acc.max((*v - log_norms[0]).abs()));
    if spread > T::lit(1e-8) {
        return Err(Error::NormalizationViolated(format!(
            "log(π_k det M_k) differs across components by {spread}"
        )));
    }
    let w = softmax(&exps);
    let mut out = vec![T::zero(); x.len()];
    for (wk, prec) in w.iter().zip(&precisions) {
        let px = prec.mul_vec(x)?;
        for (o, v) in out.iter_mut().zip(px) {
            *o -= *wk * v;
        }
    }
    Ok(out)
}

/// `x + σ_eff² ∇ log q(x)`, the posterior mean of the clean token.
pub fn tweedie_denoise<T: Scalar>(x: &[T], model: &GmmTokenModel<T>) -> Result<Vec<T>> {
    let score = gmm_score(x, model, ScoreForm::General)?;
    let s2 = model.noise_variance();
    Ok(x.iter().zip(score).map(|(xi, si)| *xi + s2 * si).collect())
}

/// Softmax-of-projections approximation:
/// `Σ_k softmax_k(‖U_kᵀx‖²/(2σ_eff²)) U_kU_kᵀx`.
pub fn tweedie_approx<T: Scalar>(x: &[T], model: &GmmTokenModel<T>) -> Result<Vec<T>> {
    model.require_noise()?;
    model.check_point(x)?;
    let two_s2 = T::lit(2.0) * model.noise_variance();
    let projections: Vec<Vec<T>> = model
        .bases
        .bases()
        .iter()
        .map(|u| coords(u, x))
        .collect::<Result<_>>()?;
    let logits: Vec<T> = projections.iter().map(|c| dot(c, c) / two_s2).collect();
    let w = softmax(&logits);
    let mut out = vec![T::zero(); x.len()];
    for ((u, c), wk) in model.bases.bases().iter().zip(&projections).zip(w) {
        let back = u.mul_vec(c)?;
        for (o, v) in out.iter_mut().zip(back) {
            *o += wk * v;
        }
    }
    Ok(out)
}

/// `Uᵀx`.
fn coords<T: Scalar>(u: &Matrix<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(u.t_matmul(&Matrix::column_vector(x))?.into_vec())
}

/// `U_kU_kᵀx` for the `k` with the largest `‖U_kᵀx‖`; ties go to the lowest index.
pub fn nearest_subspace_project<T: Scalar>(x: &[T], bases: &SubspaceBasisSet<T>) -> Result<(Vec<T>, usize)> {
    if x.len() != bases.ambient_dim() {
        return shape_err(format!("point has {} coordinates, bases live in {}", x.len(), bases.ambient_dim()));
    }
    let mut best: Option<(T, usize, Vec<T>)> = None;
    for (k, u) in bases.bases().iter().enumerate() {
        let c = coords(u, x)?;
        let energy = dot(&c, &c);
        if best.as_ref().is_none_or(|(e, _, _)| energy > *e) {
            best = Some((energy, k, c));
        }
    }
    let (_, k, c) = best.expect("at least one basis");
    Ok((bases.basis(k).mul_vec(&c)?, k))
}

/// `t_{ℓ+1} = (1 + 2κ) t_ℓ`, starting from `t0`.
pub fn time_schedule<T: Scalar>(t0: T, kappa: T, steps: usize) -> Vec<T> {
    let factor = T::one() + T::lit(2.0) * kappa;
    std::iter::successors(Some(t0), |t| Some(*t * factor)).take(steps + 1).collect()
}

/// The compression step applied in the experiment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionOperator {
    /// `Z − κ∇R^c(Z|U)` with `κ = 1/β`.
    #[default]
    ExactGradient,
    /// Convex attention step `(1 − βκ)Z + βκ·MSSA(Z)` with `κ = 1/β`.
    Attention,
}

/// How `ε` is chosen for a given noise level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum EpsilonRule {
    /// `ε = σ`.
    #[default]
    MatchNoise,
    Fixed(f64),
    /// `ε² = σd / (nK √(σ + √(n/d)))`.
    NoiseScaled,
}


impl EpsilonRule {
    pub fn epsilon(self, sigma: f64, d: usize, n: usize, k: usize) -> Result<f64> {
        let eps = match self {
            EpsilonRule::MatchNoise => sigma,
            EpsilonRule::Fixed(e) => e,
            EpsilonRule::NoiseScaled => {
                let (d, n, k) = (d as f64, n as f64, k as f64);
                (sigma * d / (n * k * (sigma + (n / d).sqrt()).sqrt())).sqrt()
            }
        };
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon rule {self:?} gives epsilon = {eps} at sigma = {sigma}; use a fixed epsilon"
            )));
        }
        Ok(eps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d: usize,
    pub n: usize,
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub operator: CompressionOperator,
    #[serde(default)]
    pub epsilon_rule: EpsilonRule,
}

impl ExperimentConfig {
    pub fn denoising_regime(sigma: f64, trials: usize, seed: u64) -> Self {
        Self {
            d: 64,
            n: 32,
            p: 8,
            k: 8,
            sigma,
            trials,
            seed,
            operator: CompressionOperator::ExactGradient,
            epsilon_rule: EpsilonRule::MatchNoise,
        }
    }

    /// Checks `d ≥ n ≥ p ≥ K ≥ 2` and `Kp = d`.
    pub fn validate(&self) -> Result<()> {
        let ordered = self.d >= self.n && self.n >= self.p && self.p >= self.k && self.k >= 2;
        if !ordered || self.k * self.p != self.d {
            return Err(Error::InvalidArgument(format!(
                "need d ≥ n ≥ p ≥ K ≥ 2 and Kp = d (d={}, n={}, p={}, K={})",
                self.d, self.n, self.p, self.k
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    /// Linear-interpolation quantiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            min: v[0],
            q25: at(0.25),
            median: at(0.5),
            q75: at(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    /// Mean off-subspace residual before and after the step.
    pub residual_before: f64,
    pub residual_after: f64,
    /// Tokens whose residual strictly decreased.
    pub decreased: usize,
    /// Cosine alignments of the step with the denoising direction, one per
    /// token where both displacements are nonzero.
    pub alignments: Vec<f64>,
    /// Largest step displacement norm relative to the token norm.
    pub max_relative_displacement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub d: usize,
    pub n: usize,
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub operator: CompressionOperator,
    pub residual_decrease_fraction: f64,
    pub alignment_quantiles: Option<Quantiles>,
    pub per_trial: Vec<TrialStats>,
}

/// Runs one compression step on freshly sampled tokens per trial and compares
/// it with nearest-subspace denoising. Trials run in parallel; trial `t`
/// always draws from substream `t`, so results do not depend on scheduling.
pub fn compression_denoising_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let epsilon = cfg.epsilon_rule.epsilon(cfg.sigma, cfg.d, cfg.n, cfg.k)?;
    let root = RngStream::new(cfg.seed, 0x6a6d);
    let bases = SubspaceBasisSet::<f64>::random(cfg.d, cfg.p, cfg.k, &mut root.substream(u64::MAX).generator())?;
    let model = GmmTokenModel::isotropic(bases, cfg.sigma)?;
    let rate = RateParams {
        kappa: 1.0 / RateParams::with_epsilon(epsilon).beta(cfg.p, cfg.n),
        ..RateParams::with_epsilon(epsilon)
    };

    let per_trial = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(&model, &rate, cfg, &root.substream(t as u64)))
        .collect::<Result<Vec<_>>>()?;

    let tokens = (cfg.trials * cfg.n) as f64;
    let decreased: usize = per_trial.iter().map(|t| t.decreased).sum();
    let alignments: Vec<f64> = per_trial.iter().flat_map(|t| t.alignments.iter().copied()).collect();
    Ok(ExperimentReport {
        d: cfg.d,
        n: cfg.n,
        p: cfg.p,
        k: cfg.k,
        sigma: cfg.sigma,
        trials: cfg.trials,
        seed: cfg.seed,
        epsilon,
        operator: cfg.operator,
        residual_decrease_fraction: decreased as f64 / tokens,
        alignment_quantiles: Quantiles::of(&alignments),
        per_trial,
    })
}

fn run_trial(
    model: &GmmTokenModel<f64>,
    rate: &RateParams<f64>,
    cfg: &ExperimentConfig,
    stream: &RngStream,
) -> Result<TrialStats> {
    let (z, labels) = sample_tokens(model, cfg.n, stream)?;
    let stepped = match cfg.operator {
        CompressionOperator::ExactGradient => {
            let g = grad_rc_exact(&z, &model.bases, rate)?;
            let mut out = z.clone();
            out.axpy(-rate.kappa, &g)?;
            out
        }
        CompressionOperator::Attention => {
            let attn = AttentionParams::exact_basis(&model.bases, rate.epsilon, true);
            compression_step(&z, &attn, rate, CompressionVariant::Convex, None)?
        }
    };
    let residual = |v: &[f64], k: usize| -> Result<f64> {
        let u = model.bases.basis(k);
        let proj = u.mul_vec(&coords(u, v)?)?;
        Ok(norm2(&v.iter().zip(&proj).map(|(a, b)| a - b).collect::<Vec<_>>()))
    };

    let mut stats = TrialStats {
        residual_before: 0.0,
        residual_after: 0.0,
        decreased: 0,
        alignments: Vec::new(),
        max_relative_displacement: 0.0,
    };
    for (i, &s) in labels.iter().enumerate() {
        let before = z.column(i);
        let after = stepped.column(i);
        let r0 = residual(&before, s)?;
        let r1 = residual(&after, s)?;
        stats.residual_before += r0;
        stats.residual_after += r1;
        if r1 < r0 {
            stats.decreased += 1;
        }
        let disp: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
        let dn = norm2(&disp);
        let zn = norm2(&before);
        if zn > 0.0 {
            stats.max_relative_displacement = stats.max_relative_displacement.max(dn / zn);
        }
        if model.sigma > 0.0 {
            let denoised = tweedie_denoise(&before, model)?;
            let den: Vec<f64> = denoised.iter().zip(&before).map(|(a, b)| a - b).collect();
            let nn = norm2(&den);
            if dn > 0.0 && nn > 0.0 {
                stats.alignments.push(dot(&disp, &den) / (dn * nn));
            }
        }
    }
    stats.residual_before /= cfg.n as f64;
    stats.residual_after /= cfg.n as f64;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let q = Quantiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((q.min, q.q25, q.median, q.q75, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert!(Quantiles::of(&[]).is_none());
    }

    #[test]
    fn schedule_grows_geometrically() {
        assert_eq!(time_schedule(1.0, 0.5, 3), vec![1.0, 2.0, 4.0, 8.0]);
    }

    #[test]
    fn regime_is_enforced() {
        let mut cfg = ExperimentConfig::denoising_regime(0.1, 1, 0);
        cfg.p = 4;
        assert!(compression_denoising_experiment(&cfg).is_err());
        let cfg = ExperimentConfig::denoising_regime(0.0, 1, 0);
        assert!(compression_denoising_experiment(&cfg).is_err());
    }
}
