mod common;

use common::*;
use crate_core::gmm::*;
use crate_core::numeric::matrix::{dot, norm2};
use crate_core::rate::SubspaceBasisSet;
use crate_core::{Error, Mat64, RngStream};
use proptest::prelude::*;

fn model(d: usize, p: usize, k: usize, sigma: f64, seed: u64) -> GmmTokenModel<f64> {
    let bases = SubspaceBasisSet::random(d, p, k, &mut rng(seed)).unwrap();
    GmmTokenModel::isotropic(bases, sigma).unwrap()
}

fn off_subspace(x: &[f64], u: &Mat64) -> f64 {
    let c = u.t_matmul(&Mat64::column_vector(x)).unwrap();
    let back = u.matmul(&c).unwrap();
    norm2(&x.iter().zip(back.as_slice()).map(|(a, b)| a - b).collect::<Vec<_>>())
}

#[test]
fn noiseless_degenerate_sampler_gives_zeros() {
    let bases = SubspaceBasisSet::random(5, 2, 1, &mut rng(50)).unwrap();
    let m = GmmTokenModel::new(
        bases,
        CoeffCovariance::Diagonal(vec![0.0, 0.0]),
        vec![1.0],
        0.0,
        NoiseConvention::PerCoordinate,
    )
    .unwrap();
    let (z, labels) = sample_tokens(&m, 7, &RngStream::new(1, 2)).unwrap();
    assert_eq!(z.max_abs(), 0.0);
    assert_eq!(labels, vec![0; 7]);
}

#[test]
fn noiseless_tokens_lie_on_their_subspace() {
    let m = model(8, 2, 3, 0.0, 51);
    let (z, labels) = sample_tokens(&m, 50, &RngStream::new(3, 0)).unwrap();
    for (i, &s) in labels.iter().enumerate() {
        assert!(off_subspace(&z.column(i), m.bases.basis(s)) <= 1e-10);
    }
    assert!(labels.iter().any(|&s| s != labels[0]));
}

#[test]
fn sampler_is_bit_deterministic() {
    let m = model(6, 2, 3, 0.2, 52);
    let s = RngStream::new(9, 4);
    assert_eq!(sample_tokens(&m, 20, &s).unwrap(), sample_tokens(&m, 20, &s).unwrap());
}

#[test]
fn empirical_covariance_matches_model() {
    let bases = SubspaceBasisSet::random(3, 1, 2, &mut rng(53)).unwrap();
    let m = GmmTokenModel::new(
        bases,
        CoeffCovariance::Diagonal(vec![1.5]),
        vec![0.4, 0.6],
        0.5,
        NoiseConvention::PerCoordinate,
    )
    .unwrap();
    let (z, labels) = sample_tokens(&m, 100_000, &RngStream::new(7, 7)).unwrap();
    for k in 0..2 {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        let count = idx.len() as f64;
        let expect_share = m.mixture[k];
        assert!((count / 1e5 - expect_share).abs() <= 4.0 * (expect_share * (1.0 - expect_share) / 1e5).sqrt());
        let zk = z.select_columns(&idx).unwrap();
        let emp = zk.matmul_t(&zk).unwrap().scale(1.0 / count);
        let c = m.noisy_covariance(k);
        for i in 0..3 {
            for j in 0..3 {
                let se = ((c[(i, i)] * c[(j, j)] + c[(i, j)].powi(2)) / count).sqrt();
                assert!((emp[(i, j)] - c[(i, j)]).abs() <= 3.0 * se, "({i},{j}) {} vs {}", emp[(i, j)], c[(i, j)]);
            }
        }
    }
}

#[test]
fn normalized_noise_convention_divides_by_dimension() {
    let m = model(8, 2, 2, 0.4, 54);
    assert_close(m.noise_variance(), 0.16 / 8.0, 1e-15);
    let per = GmmTokenModel {
        noise: NoiseConvention::PerCoordinate,
        ..m
    };
    assert_close(per.noise_variance(), 0.16, 1e-15);
}

#[test]
fn log_density_of_standard_normal() {
    let bases = SubspaceBasisSet::random(3, 1, 1, &mut rng(55)).unwrap();
    let m = GmmTokenModel::new(
        bases,
        CoeffCovariance::Diagonal(vec![0.0]),
        vec![1.0],
        1.0,
        NoiseConvention::PerCoordinate,
    )
    .unwrap();
    let x = [0.3, -1.2, 2.0];
    let expect = -1.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * dot(&x, &x);
    assert_close(gmm_log_density(&x, &m).unwrap(), expect, 1e-13);
}

#[test]
fn log_density_needs_noise() {
    let m = model(4, 2, 2, 0.0, 56);
    assert!(gmm_log_density(&[0.0; 4], &m).is_err());
    assert!(gmm_score(&[0.0; 4], &m, ScoreForm::General).is_err());
}

#[test]
fn log_density_matches_quadrature_in_one_dimension() {
    let bases = SubspaceBasisSet::new(vec![Mat64::from_rows(&[vec![1.0]]), Mat64::from_rows(&[vec![-1.0]])]).unwrap();
    let lambda = 2.0;
    let sigma = 0.5;
    let m = GmmTokenModel::new(
        bases,
        CoeffCovariance::Diagonal(vec![lambda]),
        vec![0.3, 0.7],
        sigma,
        NoiseConvention::PerCoordinate,
    )
    .unwrap();
    let normal = |v: f64, var: f64| (-0.5 * v * v / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    for x in [-2.5, -0.4, 0.0, 0.9, 3.1] {
        // ∫ Σ_k π_k N(a; 0, λ) N(x − u_k a; 0, σ²) da, trapezoid on a wide grid.
        let (lo, hi, steps) = (-15.0, 15.0, 60_000);
        let h = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for s in 0..=steps {
            let a = lo + h * s as f64;
            let w = if s == 0 || s == steps { 0.5 } else { 1.0 };
            let f = 0.3 * normal(a, lambda) * normal(x - a, sigma * sigma)
                + 0.7 * normal(a, lambda) * normal(x + a, sigma * sigma);
            total += w * f * h;
        }
        assert!((gmm_log_density(&[x], &m).unwrap() - total.ln()).abs() <= 1e-6);
    }
}

#[test]
fn score_examples() {
    let m = model(5, 2, 1, 0.3, 57);
    let mut r = rng(58);
    let x = randn(5, 1, &mut r).into_vec();
    let cov = m.noisy_covariance(0);
    let expect = na_inverse(&cov).mul_vec(&x).unwrap();
    let s = gmm_score(&x, &m, ScoreForm::General).unwrap();
    for (a, b) in s.iter().zip(&expect) {
        assert_close(*a, -b, 1e-10);
    }
    let m = model(6, 2, 3, 0.3, 59);
    for form in [ScoreForm::General, ScoreForm::Normalized] {
        assert!(gmm_score(&[0.0; 6], &m, form).unwrap().iter().all(|v| v.abs() <= 1e-15));
    }
}

#[test]
fn score_matches_finite_differences_of_log_density() {
    let m = model(6, 2, 3, 0.8, 60);
    let mut r = rng(61);
    for _ in 0..10 {
        let x = randn(6, 1, &mut r);
        let s = Mat64::column_vector(&gmm_score(x.as_slice(), &m, ScoreForm::General).unwrap());
        let fd = fd_grad(&x, 1e-5, |xx| gmm_log_density(xx.as_slice(), &m).unwrap());
        assert!(rel(&s, &fd) <= 1e-6, "{}", rel(&s, &fd));
    }
}

#[test]
fn normalized_score_agrees_when_its_precondition_holds() {
    let m = model(6, 2, 3, 0.5, 62);
    let mut r = rng(63);
    for _ in 0..5 {
        let x = randn(6, 1, &mut r).into_vec();
        let a = Mat64::column_vector(&gmm_score(&x, &m, ScoreForm::General).unwrap());
        let b = Mat64::column_vector(&gmm_score(&x, &m, ScoreForm::Normalized).unwrap());
        assert!(rel(&b, &a) <= 1e-9);
    }
    let skewed = GmmTokenModel {
        mixture: vec![0.2, 0.3, 0.5],
        ..m
    };
    let err = gmm_score(&[0.1; 6], &skewed, ScoreForm::Normalized).unwrap_err();
    assert!(matches!(err, Error::NormalizationViolated(_)));
}

#[test]
fn score_satisfies_steins_identity() {
    let m = model(3, 1, 2, 0.7, 64);
    let samples = 20_000;
    let (z, _) = sample_tokens(&m, samples, &RngStream::new(5, 5)).unwrap();
    let mean: f64 = (0..samples)
        .map(|i| {
            let x = z.column(i);
            dot(&gmm_score(&x, &m, ScoreForm::General).unwrap(), &x)
        })
        .sum::<f64>()
        / samples as f64;
    let se = (2.0 * 3.0 / samples as f64).sqrt();
    assert!((mean + 3.0).abs() <= 4.0 * se, "{mean}");
}

#[test]
fn tweedie_single_component_is_the_posterior_mean() {
    let m = model(6, 2, 1, 0.4, 65);
    let mut r = rng(66);
    let sigma_cov = m.signal_covariance(0);
    let gain = sigma_cov.matmul(&na_inverse(&m.noisy_covariance(0))).unwrap();
    for _ in 0..5 {
        let x = randn(6, 1, &mut r).into_vec();
        let got = tweedie_denoise(&x, &m).unwrap();
        let expect = gain.mul_vec(&x).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn tweedie_step_is_the_scaled_score() {
    let m = model(6, 2, 3, 0.5, 67);
    let x = randn(6, 1, &mut rng(68)).into_vec();
    let score = gmm_score(&x, &m, ScoreForm::General).unwrap();
    let out = tweedie_denoise(&x, &m).unwrap();
    for i in 0..6 {
        assert_eq!(out[i], x[i] + m.noise_variance() * score[i]);
    }
}

#[test]
fn tweedie_fixes_support_points_as_noise_vanishes() {
    let m = model(8, 2, 4, 1e-6, 69);
    let (z, _) = sample_tokens(&GmmTokenModel { sigma: 0.0, ..m.clone() }, 10, &RngStream::new(2, 2)).unwrap();
    for i in 0..10 {
        let x = z.column(i);
        let out = tweedie_denoise(&x, &m).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() <= 1e-4);
        }
    }
}

#[test]
fn projection_approximant_converges_as_noise_vanishes() {
    let mut worst = Vec::new();
    for sigma in [0.3, 0.1, 0.03, 0.01] {
        let m = model(16, 2, 4, sigma, 70);
        let (z, _) = sample_tokens(&m, 200, &RngStream::new(11, 0)).unwrap();
        let dev = (0..200)
            .map(|i| {
                let x = z.column(i);
                let a = tweedie_approx(&x, &m).unwrap();
                let e = tweedie_denoise(&x, &m).unwrap();
                a.iter().zip(&e).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        worst.push(dev);
    }
    assert!(worst.windows(2).all(|w| w[1] < w[0]), "{worst:?}");
}

#[test]
fn nearest_subspace_examples() {
    let bases = SubspaceBasisSet::random(6, 2, 3, &mut rng(71)).unwrap();
    let x: Vec<f64> = bases.basis(1).mul_vec(&[0.7, -1.1]).unwrap();
    let (proj, k) = nearest_subspace_project(&x, &bases).unwrap();
    assert_eq!(k, 1);
    for (a, b) in proj.iter().zip(&x) {
        assert!((a - b).abs() <= 1e-14);
    }

    let axes = SubspaceBasisSet::new(vec![
        Mat64::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]),
        Mat64::from_rows(&[vec![0.0], vec![1.0], vec![0.0]]),
    ])
    .unwrap();
    let (proj, k) = nearest_subspace_project(&[0.0, 0.0, 2.0], &axes).unwrap();
    assert_eq!((proj, k), (vec![0.0; 3], 0));
}

#[test]
fn nearest_subspace_matches_brute_force() {
    let bases = SubspaceBasisSet::random(7, 2, 3, &mut rng(72)).unwrap();
    let mut r = rng(73);
    for _ in 0..50 {
        let x = randn(7, 1, &mut r).into_vec();
        let energies: Vec<f64> = bases
            .bases()
            .iter()
            .map(|u| {
                let c = u.t_matmul(&Mat64::column_vector(&x)).unwrap();
                c.dot(&c).unwrap()
            })
            .collect();
        let best = (0..3).max_by(|&a, &b| energies[a].total_cmp(&energies[b])).unwrap();
        let (proj, k) = nearest_subspace_project(&x, &bases).unwrap();
        assert_eq!(k, best);
        let u = bases.basis(best);
        let expect = u.matmul(&u.t_matmul(&Mat64::column_vector(&x)).unwrap()).unwrap();
        assert!(rel(&Mat64::column_vector(&proj), &expect) <= 1e-14);
    }
}

#[test]
fn time_schedule_grows_exponentially() {
    assert_eq!(time_schedule(1.0, 0.5, 3), vec![1.0, 2.0, 4.0, 8.0]);
    assert_eq!(time_schedule(0.25, 0.0, 2), vec![0.25; 3]);
    let t = time_schedule(0.1, 0.3, 10);
    assert_eq!(t.len(), 11);
    assert_close(t[10], 0.1 * 1.6f64.powi(10), 1e-13);
}

#[test]
fn experiment_without_noise_keeps_tokens_on_support() {
    let cfg = ExperimentConfig {
        epsilon_rule: EpsilonRule::Fixed(0.5),
        ..ExperimentConfig::denoising_regime(0.0, 5, 1)
    };
    let report = compression_denoising_experiment(&cfg).unwrap();
    for t in &report.per_trial {
        assert!(t.residual_before <= 1e-12);
        assert!(t.residual_after <= 1e-12);
        assert!(t.max_relative_displacement <= 1.0 + 1e-12);
        assert!(t.alignments.is_empty());
    }
    assert!(report.alignment_quantiles.is_none());
}

#[test]
fn experiment_reports_the_requested_shape() {
    let report = compression_denoising_experiment(&ExperimentConfig::denoising_regime(0.01, 20, 4)).unwrap();
    assert_eq!(report.per_trial.len(), 20);
    assert!(report.residual_decrease_fraction >= 0.95);
    assert_eq!(report.epsilon, 0.01);
    let json = serde_json::to_value(&report).unwrap();
    for key in ["d", "n", "p", "K", "sigma", "trials", "seed", "residual_decrease_fraction", "alignment_quantiles"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let again = compression_denoising_experiment(&ExperimentConfig::denoising_regime(0.01, 20, 4)).unwrap();
    assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn alignment_improves_as_noise_shrinks() {
    let medians: Vec<f64> = [0.3, 0.1, 0.03]
        .iter()
        .map(|&s| {
            let r = compression_denoising_experiment(&ExperimentConfig::denoising_regime(s, 20, 2)).unwrap();
            r.alignment_quantiles.unwrap().median
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] > w[0]), "{medians:?}");
}

#[test]
fn experiment_enforces_the_regime() {
    for (d, n, p, k) in [(64, 32, 4, 8), (64, 80, 8, 8), (8, 8, 8, 1), (64, 32, 8, 9)] {
        let cfg = ExperimentConfig { d, n, p, k, ..ExperimentConfig::denoising_regime(0.1, 1, 0) };
        assert!(compression_denoising_experiment(&cfg).is_err(), "{d} {n} {p} {k}");
    }
    assert!(EpsilonRule::MatchNoise.epsilon(0.0, 64, 32, 8).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn log_density_is_even(seed in any::<u64>()) {
        let m = model(5, 2, 2, 0.6, seed);
        let x = randn(5, 1, &mut rng(seed ^ 1)).into_vec();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = gmm_log_density(&x, &m).unwrap();
        let b = gmm_log_density(&neg, &m).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), d in 2usize..8) {
        let p = 1 + seed as usize % (d - 1);
        let bases = SubspaceBasisSet::random(d, p, 3, &mut rng(seed)).unwrap();
        let x = randn(d, 1, &mut rng(seed ^ 2)).into_vec();
        let (once, k) = nearest_subspace_project(&x, &bases).unwrap();
        let (twice, k2) = nearest_subspace_project(&once, &bases).unwrap();
        prop_assert_eq!(k, k2);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
