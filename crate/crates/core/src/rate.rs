//! Coding rates, rate reduction, and their derivatives.
//!
//! Token matrices are `d×n` with one token per column. Derived scales are
//! always recomputed from the shapes at hand:
//! `α = d/(nε²)`, `β = p/(nε²)`, `γ_k = d/(n_k ε²)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::autodiff::{Tape, Var};
use crate::numeric::decomp::{gram_solve, logdet_gram, orthonormalize_columns, shifted_gram, solve_spd};
use crate::numeric::matrix::Matrix;
use crate::numeric::rng::normal_matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct RateParams<T> {
    pub epsilon: T,
    pub lambda: T,
    pub kappa: T,
    pub eta: T,
}

impl<T: Scalar> Default for RateParams<T> {
    fn default() -> Self {
        Self {
            epsilon: T::lit(0.5),
            lambda: T::lit(0.1),
            kappa: T::lit(0.5),
            eta: T::lit(0.1),
        }
    }
}

impl<T: Scalar> RateParams<T> {
    pub fn with_epsilon(epsilon: T) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > T::zero() && self.lambda >= T::zero() && self.kappa > T::zero() && self.eta > T::zero();
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "rate parameters out of range: epsilon={}, lambda={}, kappa={}, eta={}",
                self.epsilon, self.lambda, self.kappa, self.eta
            )));
        }
        Ok(())
    }

    fn per_token(&self, dim: usize, n: usize) -> T {
        T::lit(dim as f64) / (T::lit(n as f64) * self.epsilon * self.epsilon)
    }

    /// `d/(nε²)`
    pub fn alpha(&self, d: usize, n: usize) -> T {
        self.per_token(d, n)
    }

    /// `p/(nε²)`
    pub fn beta(&self, p: usize, n: usize) -> T {
        self.per_token(p, n)
    }

    /// `d/(n_k ε²)`
    pub fn gamma(&self, d: usize, n_k: usize) -> T {
        self.per_token(d, n_k)
    }
}

/// Disjoint class index sets covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MembershipPartition {
    classes: Vec<Vec<usize>>,
    n: usize,
}

impl MembershipPartition {
    /// Builds the partition from one label per token.
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut classes = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "token {i} has label {l} but there are only {num_classes} classes"
                )));
            }
            classes[l].push(i);
        }
        Ok(Self {
            classes,
            n: labels.len(),
        })
    }

    pub fn from_index_sets(classes: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for set in &classes {
            for &i in set {
                if i >= n || seen[i] {
                    return Err(Error::InvalidArgument(format!(
                        "index {i} is out of range or assigned twice"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("token {missing} has no class")));
        }
        Ok(Self { classes, n })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.n
    }

    pub fn members(&self, k: usize) -> &[usize] {
        &self.classes[k]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }
}

/// `K` bases `U_k`, each `d×p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct SubspaceBasisSet<T: Scalar> {
    bases: Vec<Matrix<T>>,
}

impl<T: Scalar> SubspaceBasisSet<T> {
    /// Accepts arbitrary `d×p` matrices (trainable bases need not be orthonormal).
    pub fn new(bases: Vec<Matrix<T>>) -> Result<Self> {
        let Some(first) = bases.first() else {
            return Err(Error::InvalidArgument("a basis set needs at least one basis".into()));
        };
        let shape = first.shape();
        if let Some(bad) = bases.iter().position(|b| b.shape() != shape) {
            return shape_err(format!(
                "basis {bad} is {:?}, expected {shape:?}",
                bases[bad].shape()
            ));
        }
        Ok(Self { bases })
    }

    /// Orthonormalizes each basis independently.
    pub fn orthonormalized(bases: Vec<Matrix<T>>) -> Result<Self> {
        let bases = bases.iter().map(orthonormalize_columns).collect::<Result<Vec<_>>>()?;
        Self::new(bases)
    }

    /// Random orthonormal bases. When `Kp ≤ d` the subspaces are also
    /// mutually orthogonal.
    pub fn random<R: Rng + ?Sized>(d: usize, p: usize, k: usize, rng: &mut R) -> Result<Self> {
        if p == 0 || k == 0 || p > d {
            return Err(Error::InvalidArgument(format!(
                "need 1 ≤ p ≤ d and K ≥ 1 (d={d}, p={p}, K={k})"
            )));
        }
        if k * p <= d {
            let joint = orthonormalize_columns(&normal_matrix(d, k * p, T::one(), rng))?;
            let bases = (0..k).map(|i| joint.columns(i * p, p)).collect::<Result<Vec<_>>>()?;
            Self::new(bases)
        } else {
            let bases = (0..k)
                .map(|_| orthonormalize_columns(&normal_matrix(d, p, T::one(), rng)))
                .collect::<Result<Vec<_>>>()?;
            Self::new(bases)
        }
    }

    pub fn bases(&self) -> &[Matrix<T>] {
        &self.bases
    }

    pub fn basis(&self, k: usize) -> &Matrix<T> {
        &self.bases[k]
    }

    pub fn num_subspaces(&self) -> usize {
        self.bases.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.bases[0].rows()
    }

    pub fn subspace_dim(&self) -> usize {
        self.bases[0].cols()
    }

    /// `[U_1, …, U_K]`, `d×(pK)`.
    pub fn stacked(&self) -> Matrix<T> {
        let refs: Vec<&Matrix<T>> = self.bases.iter().collect();
        Matrix::hcat(&refs).expect("bases share a shape")
    }

    /// Rows stack `U_kᵀ`, `(pK)×d`.
    pub fn stacked_transpose(&self) -> Matrix<T> {
        self.stacked().transpose()
    }

    /// Applies `Q` to every basis.
    pub fn rotated(&self, q: &Matrix<T>) -> Result<Self> {
        Self::new(self.bases.iter().map(|u| q.matmul(u)).collect::<Result<Vec<_>>>()?)
    }

    fn check_tokens(&self, z: &Matrix<T>) -> Result<()> {
        if z.rows() != self.ambient_dim() {
            return shape_err(format!(
                "tokens have dimension {} but bases live in dimension {}",
                z.rows(),
                self.ambient_dim()
            ));
        }
        Ok(())
    }
}

/// `½ log det(I + α ZᵀZ)`.
pub fn coding_rate<T: Scalar>(z: &Matrix<T>, params: &RateParams<T>) -> Result<T> {
    if z.cols() == 0 {
        return Ok(T::zero());
    }
    let alpha = params.alpha(z.rows(), z.cols());
    Ok(T::lit(0.5) * logdet_gram(z, alpha)?)
}

/// `½ Σ_k log det(I + γ_k Z Π_k Zᵀ)`.
pub fn coding_rate_membership<T: Scalar>(
    z: &Matrix<T>,
    part: &MembershipPartition,
    params: &RateParams<T>,
) -> Result<T> {
    if part.num_tokens() != z.cols() {
        return shape_err(format!(
            "partition covers {} tokens but Z has {}",
            part.num_tokens(),
            z.cols()
        ));
    }
    let mut total = T::zero();
    for k in 0..part.num_classes() {
        let members = part.members(k);
        if members.is_empty() {
            return Err(Error::EmptyClass(k));
        }
        let zk = z.select_columns(members)?;
        total += logdet_gram(&zk, params.gamma(z.rows(), members.len()))?;
    }
    Ok(T::lit(0.5) * total)
}

/// `½ Σ_k log det(I + β (U_kᵀZ)ᵀ(U_kᵀZ))`.
pub fn coding_rate_subspaces<T: Scalar>(
    z: &Matrix<T>,
    u: &SubspaceBasisSet<T>,
    params: &RateParams<T>,
) -> Result<T> {
    u.check_tokens(z)?;
    if z.cols() == 0 {
        return Ok(T::zero());
    }
    let beta = params.beta(u.subspace_dim(), z.cols());
    let mut total = T::zero();
    for uk in u.bases() {
        total += logdet_gram(&uk.t_matmul(z)?, beta)?;
    }
    Ok(T::lit(0.5) * total)
}

/// `R(Z) − R^c(Z | U)`.
pub fn rate_reduction<T: Scalar>(z: &Matrix<T>, u: &SubspaceBasisSet<T>, params: &RateParams<T>) -> Result<T> {
    Ok(coding_rate(z, params)? - coding_rate_subspaces(z, u, params)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityNorm {
    L0,
    L1,
}

/// Number of exactly nonzero entries.
pub fn l0_count<T: Scalar>(z: &Matrix<T>) -> usize {
    z.as_slice().iter().filter(|v| **v != T::zero()).count()
}

/// `ΔR(Z|U) − λ‖Z‖`, with the norm selected by `norm`.
pub fn sparse_rate_reduction<T: Scalar>(
    z: &Matrix<T>,
    u: &SubspaceBasisSet<T>,
    params: &RateParams<T>,
    norm: SparsityNorm,
) -> Result<T> {
    let penalty = match norm {
        SparsityNorm::L0 => T::lit(l0_count(z) as f64),
        SparsityNorm::L1 => z.l1_norm(),
    };
    Ok(rate_reduction(z, u, params)? - params.lambda * penalty)
}

/// Unnormalized energy `−(R − R^c − λ‖Z‖₁)`.
pub fn energy<T: Scalar>(z: &Matrix<T>, u: &SubspaceBasisSet<T>, params: &RateParams<T>) -> Result<T> {
    Ok(-sparse_rate_reduction(z, u, params, SparsityNorm::L1)?)
}

/// `∇_Z R^c = β Σ_k U_k (U_kᵀZ)(I + β(U_kᵀZ)ᵀ(U_kᵀZ))⁻¹`.
pub fn grad_rc_exact<T: Scalar>(z: &Matrix<T>, u: &SubspaceBasisSet<T>, params: &RateParams<T>) -> Result<Matrix<T>> {
    u.check_tokens(z)?;
    let beta = params.beta(u.subspace_dim(), z.cols().max(1));
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for uk in u.bases() {
        let proj = uk.t_matmul(z)?;
        out.axpy(beta, &uk.matmul(&gram_solve(&proj, beta)?)?)?;
    }
    Ok(out)
}

/// First-order Neumann approximation of [`grad_rc_exact`]:
/// `β Σ_k U_k (U_kᵀZ)(I − β(U_kᵀZ)ᵀ(U_kᵀZ))`.
pub fn grad_rc_neumann<T: Scalar>(z: &Matrix<T>, u: &SubspaceBasisSet<T>, params: &RateParams<T>) -> Result<Matrix<T>> {
    u.check_tokens(z)?;
    let beta = params.beta(u.subspace_dim(), z.cols().max(1));
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for uk in u.bases() {
        let proj = uk.t_matmul(z)?;
        let gram = proj.t_matmul(&proj)?;
        let mut corrected = proj.clone();
        corrected.axpy(-beta, &proj.matmul(&gram)?)?;
        out.axpy(beta, &uk.matmul(&corrected)?)?;
    }
    Ok(out)
}

/// `∇_Z R = α Z (I + αZᵀZ)⁻¹`.
pub fn grad_r<T: Scalar>(z: &Matrix<T>, params: &RateParams<T>) -> Result<Matrix<T>> {
    let alpha = params.alpha(z.rows(), z.cols().max(1));
    Ok(gram_solve(z, alpha)?.scale(alpha))
}

/// Hessian of `R` applied to a direction:
/// `αΔM⁻¹ − α² Z M⁻¹ (ZᵀΔ + ΔᵀZ) M⁻¹` with `M = I + αZᵀZ`.
pub fn hessian_r_apply<T: Scalar>(z: &Matrix<T>, delta: &Matrix<T>, params: &RateParams<T>) -> Result<Matrix<T>> {
    if z.shape() != delta.shape() {
        return shape_err(format!("Z is {:?} but Δ is {:?}", z.shape(), delta.shape()));
    }
    let alpha = params.alpha(z.rows(), z.cols().max(1));
    let m = shifted_gram(z, alpha);
    // X M⁻¹ = (M⁻¹ Xᵀ)ᵀ since M is symmetric.
    let right_solve = |x: &Matrix<T>| -> Result<Matrix<T>> { Ok(solve_spd(&m, &x.transpose())?.transpose()) };
    let first = right_solve(delta)?.scale(alpha);
    let zt_d = z.t_matmul(delta)?;
    let sym = zt_d.add(&zt_d.transpose())?;
    let inner = solve_spd(&m, &right_solve(&sym)?)?;
    let mut out = first;
    out.axpy(-alpha * alpha, &z.matmul(&inner)?)?;
    Ok(out)
}

/// Thresholds used by [`sparsity_metrics`].
pub const SPARSITY_THRESHOLDS: [f64; 3] = [1.0, 0.5, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityMetrics {
    /// `‖Z‖₀ / (d·n)` counting exact nonzeros.
    pub l0_fraction: f64,
    pub l1: f64,
    /// Fraction of entries with `|z| < τ` for each entry of [`SPARSITY_THRESHOLDS`].
    pub below_threshold: [f64; 3],
}

pub fn sparsity_metrics<T: Scalar>(z: &Matrix<T>) -> SparsityMetrics {
    let total = z.len().max(1) as f64;
    let mut below = [0.0; 3];
    for (slot, tau) in below.iter_mut().zip(SPARSITY_THRESHOLDS) {
        let count = z.as_slice().iter().filter(|v| v.to_f64_lossy().abs() < tau).count();
        *slot = count as f64 / total;
    }
    SparsityMetrics {
        l0_fraction: l0_count(z) as f64 / total,
        l1: z.l1_norm().to_f64_lossy(),
        below_threshold: below,
    }
}

/// `R(Z)` recorded on a tape.
pub fn tape_coding_rate<T: Scalar>(tape: &Tape<T>, z: Var, params: &RateParams<T>) -> Result<Var> {
    let (d, n) = tape.shape(z);
    let ld = tape.logdet_gram(z, params.alpha(d, n.max(1)))?;
    Ok(tape.scale(ld, T::lit(0.5)))
}

/// `R^c(Z|U)` recorded on a tape; the bases may be constants or parameters.
pub fn tape_coding_rate_subspaces<T: Scalar>(
    tape: &Tape<T>,
    z: Var,
    bases: &[Var],
    params: &RateParams<T>,
) -> Result<Var> {
    let n = tape.shape(z).1.max(1);
    let mut total: Option<Var> = None;
    for &uk in bases {
        let p = tape.shape(uk).1;
        let ukt = tape.transpose(uk);
        let proj = tape.matmul(ukt, z)?;
        let ld = tape.logdet_gram(proj, params.beta(p, n))?;
        total = Some(match total {
            Some(t) => tape.add(t, ld)?,
            None => ld,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no bases".into()))?;
    Ok(tape.scale(total, T::lit(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_with_alpha(alpha: f64, d: usize, n: usize) -> RateParams<f64> {
        RateParams::with_epsilon((d as f64 / (n as f64 * alpha)).sqrt())
    }

    #[test]
    fn trivial_values() {
        let p = RateParams::<f64>::default();
        assert_eq!(coding_rate(&Matrix::zeros(3, 4), &p).unwrap(), 0.0);
        let pa = params_with_alpha(3.0, 2, 2);
        assert!((coding_rate(&Matrix::identity(2), &pa).unwrap() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn single_class_membership_matches_coding_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = normal_matrix::<f64, _>(5, 7, 1.0, &mut rng);
        let p = RateParams::default();
        let part = MembershipPartition::from_labels(&[0; 7], 1).unwrap();
        let a = coding_rate_membership(&z, &part, &p).unwrap();
        let b = coding_rate(&z, &p).unwrap();
        assert!((a - b).abs() < 1e-12);
        let gap = MembershipPartition::from_labels(&[0, 0, 2], 3).unwrap();
        assert!(matches!(
            coding_rate_membership(&Matrix::zeros(5, 3), &gap, &p),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn partition_validation() {
        assert!(MembershipPartition::from_index_sets(vec![vec![0], vec![0, 1]], 2).is_err());
        assert!(MembershipPartition::from_index_sets(vec![vec![0]], 2).is_err());
        assert!(MembershipPartition::from_index_sets(vec![vec![1], vec![0]], 2).is_ok());
    }

    #[test]
    fn grads_vanish_at_origin_and_match_scalar_spectrum() {
        let p = RateParams::<f64>::default();
        let u = SubspaceBasisSet::new(vec![Matrix::identity(3)]).unwrap();
        assert_eq!(grad_rc_exact(&Matrix::zeros(3, 3), &u, &p).unwrap().max_abs(), 0.0);
        let beta = p.beta(3, 3);
        let g = grad_rc_exact(&Matrix::identity(3), &u, &p).unwrap();
        assert!(g.rel_error(&Matrix::identity(3).scale(beta / (1.0 + beta))) < 1e-14);
        let alpha = p.alpha(3, 3);
        let gr = grad_r(&Matrix::identity(3), &p).unwrap();
        assert!(gr.rel_error(&Matrix::identity(3).scale(alpha / (1.0 + alpha))) < 1e-14);
    }

    #[test]
    fn hessian_at_origin_is_scaled_identity() {
        let p = RateParams::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let delta = normal_matrix::<f64, _>(4, 3, 1.0, &mut rng);
        let h = hessian_r_apply(&Matrix::zeros(4, 3), &delta, &p).unwrap();
        assert!(h.rel_error(&delta.scale(p.alpha(4, 3))) < 1e-14);
    }

    #[test]
    fn sparsity_examples() {
        let m = sparsity_metrics(&Matrix::<f64>::zeros(2, 2));
        assert_eq!((m.l0_fraction, m.l1, m.below_threshold), (0.0, 0.0, [1.0; 3]));
        let mut z = Matrix::<f64>::zeros(2, 2);
        z[(0, 1)] = 5.0;
        let m = sparsity_metrics(&z);
        assert_eq!((m.l0_fraction, m.l1), (0.25, 5.0));
        assert_eq!(m.below_threshold, [0.75; 3]);
    }

    #[test]
    fn random_bases_are_orthonormal_and_mutually_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = SubspaceBasisSet::<f64>::random(12, 3, 4, &mut rng).unwrap();
        let s = u.stacked();
        assert!(s.t_matmul(&s).unwrap().rel_error(&Matrix::identity(12)) < 1e-12);
    }
}
