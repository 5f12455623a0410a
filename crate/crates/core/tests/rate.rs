mod common;

use common::*;
use crate_core::numeric::decomp::shifted_gram;
use crate_core::rate::*;
use crate_core::{value_and_grad, Error, Mat64};
use proptest::prelude::*;

/// ε giving `α = target` for a `d×n` token matrix.
fn eps_for_alpha(d: usize, n: usize, target: f64) -> f64 {
    (d as f64 / (n as f64 * target)).sqrt()
}

fn rc_oracle(z: &Mat64, u: &SubspaceBasisSet<f64>, params: &RateParams<f64>) -> f64 {
    let beta = params.beta(u.subspace_dim(), z.cols());
    u.bases()
        .iter()
        .map(|uk| 0.5 * logdet_oracle(&uk.t_matmul(z).unwrap(), beta))
        .sum()
}

fn standard_basis(d: usize, cols: std::ops::Range<usize>) -> Mat64 {
    let p = cols.len();
    Mat64::from_fn(d, p, |r, c| if r == cols.start + c { 1.0 } else { 0.0 })
}

#[test]
fn derived_scales() {
    let p = RateParams::with_epsilon(0.5);
    assert_close(p.alpha(8, 4), 8.0, 1e-15);
    assert_close(p.beta(2, 4), 2.0, 1e-15);
    assert_close(p.gamma(8, 2), 16.0, 1e-15);
}

#[test]
fn coding_rate_examples() {
    let params = RateParams::with_epsilon(0.7);
    assert_eq!(coding_rate(&Mat64::zeros(4, 3), &params).unwrap(), 0.0);

    let params = RateParams::with_epsilon(eps_for_alpha(2, 2, 3.0));
    assert_close(coding_rate(&Mat64::identity(2), &params).unwrap(), 4f64.ln(), 1e-14);

    let mut r = rng(10);
    let params = RateParams::with_epsilon(0.6);
    let z = randn(8, 5, &mut r);
    let alpha = params.alpha(8, 5);
    assert_close(coding_rate(&z, &params).unwrap(), 0.5 * logdet_oracle(&z, alpha), 1e-12);
}

#[test]
fn membership_rate_examples() {
    let mut r = rng(11);
    let params = RateParams::with_epsilon(0.8);
    let z = randn(6, 4, &mut r);

    let all = MembershipPartition::from_labels(&[0, 0, 0, 0], 1).unwrap();
    assert_close(
        coding_rate_membership(&z, &all, &params).unwrap(),
        coding_rate(&z, &params).unwrap(),
        1e-12,
    );
    assert_eq!(coding_rate_membership(&Mat64::zeros(6, 4), &all, &params).unwrap(), 0.0);

    let part = MembershipPartition::from_index_sets(vec![vec![0, 2], vec![1, 3]], 4).unwrap();
    let mut expect = 0.0;
    for k in 0..2 {
        let zk = z.select_columns(part.members(k)).unwrap();
        expect += 0.5 * logdet_oracle(&zk, params.gamma(6, 2));
    }
    assert_close(coding_rate_membership(&z, &part, &params).unwrap(), expect, 1e-12);
}

#[test]
fn membership_rejects_empty_and_overlapping_classes() {
    let params = RateParams::with_epsilon(0.8);
    let z = Mat64::identity(3);
    let part = MembershipPartition::from_labels(&[0, 0, 2], 3).unwrap();
    assert!(matches!(coding_rate_membership(&z, &part, &params), Err(Error::EmptyClass(1))));
    assert!(MembershipPartition::from_index_sets(vec![vec![0, 1], vec![1, 2]], 3).is_err());
    assert!(MembershipPartition::from_index_sets(vec![vec![0]], 2).is_err());
    let short = MembershipPartition::from_labels(&[0, 0], 1).unwrap();
    assert!(coding_rate_membership(&z, &short, &params).is_err());
}

#[test]
fn subspace_rate_examples() {
    let params = RateParams::with_epsilon(0.5);
    let u = SubspaceBasisSet::new(vec![standard_basis(5, 0..2), standard_basis(5, 2..4)]).unwrap();
    let mut z = Mat64::zeros(5, 3);
    for c in 0..3 {
        z[(4, c)] = 1.0 + c as f64;
    }
    assert_eq!(coding_rate_subspaces(&z, &u, &params).unwrap(), 0.0);

    let mut r = rng(12);
    let z = randn(5, 3, &mut r);
    let top = SubspaceBasisSet::new(vec![standard_basis(5, 0..2)]).unwrap();
    let block = z.row_block(0, 2).unwrap();
    let beta = params.beta(2, 3);
    assert_close(
        coding_rate_subspaces(&z, &top, &params).unwrap(),
        0.5 * logdet_oracle(&block, beta),
        1e-12,
    );

    let u = SubspaceBasisSet::random(7, 3, 3, &mut r).unwrap();
    let z = randn(7, 4, &mut r);
    assert_close(coding_rate_subspaces(&z, &u, &params).unwrap(), rc_oracle(&z, &u, &params), 1e-12);
}

#[test]
fn rate_reduction_examples() {
    let params = RateParams::with_epsilon(0.9);
    let mut r = rng(13);
    let u = SubspaceBasisSet::random(4, 2, 2, &mut r).unwrap();
    assert_eq!(rate_reduction(&Mat64::zeros(4, 3), &u, &params).unwrap(), 0.0);

    // p = d and U = I: α = β, so the two terms cancel.
    let eye = SubspaceBasisSet::new(vec![Mat64::identity(4)]).unwrap();
    let z = randn(4, 1, &mut r);
    assert!(rate_reduction(&z, &eye, &params).unwrap().abs() <= 1e-14);

    let z = randn(4, 5, &mut r);
    let expect = coding_rate(&z, &params).unwrap() - coding_rate_subspaces(&z, &u, &params).unwrap();
    assert_eq!(rate_reduction(&z, &u, &params).unwrap(), expect);
    let independent = 0.5 * logdet_oracle(&z, params.alpha(4, 5)) - rc_oracle(&z, &u, &params);
    assert_close(rate_reduction(&z, &u, &params).unwrap(), independent, 1e-12);
}

#[test]
fn sparse_rate_reduction_and_energy() {
    let mut r = rng(14);
    let u = SubspaceBasisSet::random(5, 2, 2, &mut r).unwrap();
    let params = RateParams {
        lambda: 0.3,
        ..RateParams::with_epsilon(0.7)
    };
    for norm in [SparsityNorm::L0, SparsityNorm::L1] {
        assert_eq!(sparse_rate_reduction(&Mat64::zeros(5, 3), &u, &params, norm).unwrap(), 0.0);
    }
    assert_eq!(energy(&Mat64::zeros(5, 3), &u, &params).unwrap(), 0.0);

    let z = randn(5, 3, &mut r);
    let no_penalty = RateParams { lambda: 0.0, ..params };
    let dr = rate_reduction(&z, &u, &params).unwrap();
    assert_eq!(sparse_rate_reduction(&z, &u, &no_penalty, SparsityNorm::L1).unwrap(), dr);
    assert_eq!(energy(&z, &u, &no_penalty).unwrap(), -dr);

    let l1: f64 = z.as_slice().iter().map(|v| v.abs()).sum();
    assert_close(sparse_rate_reduction(&z, &u, &params, SparsityNorm::L1).unwrap(), dr - 0.3 * l1, 1e-13);
    assert_close(energy(&z, &u, &params).unwrap(), -(dr - 0.3 * l1), 1e-13);

    let mut sparse = z.clone();
    sparse[(0, 0)] = 0.0;
    sparse[(2, 1)] = 0.0;
    let dr = rate_reduction(&sparse, &u, &params).unwrap();
    assert_close(
        sparse_rate_reduction(&sparse, &u, &params, SparsityNorm::L0).unwrap(),
        dr - 0.3 * 13.0,
        1e-13,
    );
}

#[test]
fn grad_rc_exact_examples() {
    let params = RateParams::with_epsilon(0.6);
    let mut r = rng(15);
    let u = SubspaceBasisSet::random(4, 2, 2, &mut r).unwrap();
    assert_eq!(grad_rc_exact(&Mat64::zeros(4, 3), &u, &params).unwrap().max_abs(), 0.0);

    let eye = SubspaceBasisSet::new(vec![Mat64::identity(3)]).unwrap();
    let beta = params.beta(3, 3);
    let g = grad_rc_exact(&Mat64::identity(3), &eye, &params).unwrap();
    assert!(rel(&g, &Mat64::identity(3).scale(beta / (1.0 + beta))) <= 1e-14);
}

#[test]
fn grad_rc_exact_matches_finite_differences() {
    let mut r = rng(16);
    for _ in 0..10 {
        let params = RateParams::with_epsilon(0.8);
        let u = SubspaceBasisSet::random(6, 2, 3, &mut r).unwrap();
        let z = randn(6, 4, &mut r);
        let g = grad_rc_exact(&z, &u, &params).unwrap();
        let fd = fd_grad(&z, 1e-5, |zz| rc_oracle(zz, &u, &params));
        assert!(rel(&g, &fd) <= 1e-6, "{}", rel(&g, &fd));
    }
}

#[test]
fn grad_rc_exact_matches_autodiff() {
    let mut r = rng(17);
    for _ in 0..10 {
        let params = RateParams::with_epsilon(1.1);
        let u = SubspaceBasisSet::random(8, 3, 2, &mut r).unwrap();
        let z = randn(8, 5, &mut r);
        let (v, g) = value_and_grad(std::slice::from_ref(&z), |t, p| {
            let bases: Vec<_> = u.bases().iter().map(|b| t.constant(b.clone())).collect();
            tape_coding_rate_subspaces(t, p[0], &bases, &params)
        })
        .unwrap();
        assert_close(v, coding_rate_subspaces(&z, &u, &params).unwrap(), 1e-12);
        let closed = grad_rc_exact(&z, &u, &params).unwrap();
        assert!(rel(&closed, &g[0]) <= 1e-8);
    }
}

#[test]
fn neumann_examples() {
    let params = RateParams::with_epsilon(0.5);
    let mut r = rng(18);
    let u = SubspaceBasisSet::random(6, 3, 2, &mut r).unwrap();
    assert_eq!(grad_rc_neumann(&Mat64::zeros(6, 4), &u, &params).unwrap().max_abs(), 0.0);

    // Mutually orthogonal bases: the error splits per head as exact·X_k², so
    // the relative error is bounded by max_k ‖X_k‖₂².
    for _ in 0..5 {
        let z0 = randn(6, 4, &mut r);
        let beta = params.beta(3, 4);
        let spec = |z: &Mat64| {
            u.bases()
                .iter()
                .map(|b| {
                    let proj = b.t_matmul(z).unwrap();
                    spectral_norm(&proj.t_matmul(&proj).unwrap().scale(beta))
                })
                .fold(0.0, f64::max)
        };
        let z = z0.scale((0.1 / spec(&z0)).sqrt());
        let bound = spec(&z);
        assert!(bound <= 0.1 + 1e-12);
        let exact = grad_rc_exact(&z, &u, &params).unwrap();
        let approx = grad_rc_neumann(&z, &u, &params).unwrap();
        let err = rel(&approx, &exact);
        assert!(err <= bound * bound, "{err} > {}", bound * bound);
    }
}

#[test]
fn neumann_error_is_second_order() {
    let params = RateParams::with_epsilon(0.5);
    let mut r = rng(19);
    let u = SubspaceBasisSet::random(8, 2, 3, &mut r).unwrap();
    let z0 = randn(8, 5, &mut r);
    let beta = params.beta(2, 5);
    let x_norm = |z: &Mat64| {
        u.bases()
            .iter()
            .map(|b| {
                let proj = b.t_matmul(z).unwrap();
                proj.t_matmul(&proj).unwrap().scale(beta).frobenius_norm()
            })
            .fold(0.0, f64::max)
    };
    let base = x_norm(&z0);
    let mut pts = Vec::new();
    for i in 0..=8 {
        let target = 10f64.powf(-5.0 + 0.5 * i as f64);
        let z = z0.scale((target / base).sqrt());
        let exact = grad_rc_exact(&z, &u, &params).unwrap();
        let approx = grad_rc_neumann(&z, &u, &params).unwrap();
        pts.push((x_norm(&z).ln(), rel(&approx, &exact).ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = num / den;
    assert!((slope - 2.0).abs() <= 0.2, "slope {slope}");
}

#[test]
fn grad_r_examples() {
    let params = RateParams::with_epsilon(0.7);
    assert_eq!(grad_r(&Mat64::zeros(3, 4), &params).unwrap().max_abs(), 0.0);
    let alpha = params.alpha(3, 3);
    let g = grad_r(&Mat64::identity(3), &params).unwrap();
    assert!(rel(&g, &Mat64::identity(3).scale(alpha / (1.0 + alpha))) <= 1e-14);

    let mut r = rng(20);
    for _ in 0..5 {
        let z = randn(5, 4, &mut r);
        let g = grad_r(&z, &params).unwrap();
        let a = params.alpha(5, 4);
        let fd = fd_grad(&z, 1e-5, |zz| 0.5 * logdet_oracle(zz, a));
        assert!(rel(&g, &fd) <= 1e-6);
    }
}

#[test]
fn hessian_examples() {
    let params = RateParams::with_epsilon(0.7);
    let mut r = rng(21);
    let delta = randn(4, 3, &mut r);
    let alpha = params.alpha(4, 3);
    let h = hessian_r_apply(&Mat64::zeros(4, 3), &delta, &params).unwrap();
    assert!(rel(&h, &delta.scale(alpha)) <= 1e-15);

    for _ in 0..5 {
        let z = randn(4, 3, &mut r);
        let d = randn(4, 3, &mut r);
        let h = hessian_r_apply(&z, &d, &params).unwrap();
        let step = 1e-5;
        let plus = grad_r(&z.add(&d.scale(step)).unwrap(), &params).unwrap();
        let minus = grad_r(&z.sub(&d.scale(step)).unwrap(), &params).unwrap();
        let fd = plus.sub(&minus).unwrap().scale(0.5 / step);
        assert!(rel(&h, &fd) <= 1e-5, "{}", rel(&h, &fd));
    }
}

#[test]
fn hessian_matches_explicit_formula() {
    let params = RateParams::with_epsilon(0.4);
    let mut r = rng(22);
    let z = randn(3, 5, &mut r);
    let d = randn(3, 5, &mut r);
    let alpha = params.alpha(3, 5);
    let minv = na_inverse(&shifted_gram(&z, alpha));
    let sym = z.t_matmul(&d).unwrap().add(&d.t_matmul(&z).unwrap()).unwrap();
    let mut expect = d.matmul(&minv).unwrap().scale(alpha);
    let second = z.matmul(&minv).unwrap().matmul(&sym).unwrap().matmul(&minv).unwrap();
    expect.axpy(-alpha * alpha, &second).unwrap();
    let h = hessian_r_apply(&z, &d, &params).unwrap();
    assert!(rel(&h, &expect) <= 1e-12);
}

#[test]
fn hessian_norm_respects_lipschitz_bound() {
    let mut r = rng(23);
    for _ in 0..100 {
        let params = RateParams::with_epsilon(0.5);
        let z = randn(6, 4, &mut r).scale(0.7);
        let d = randn(6, 4, &mut r);
        let d = d.scale(1.0 / d.frobenius_norm());
        let alpha = params.alpha(6, 4);
        let h = hessian_r_apply(&z, &d, &params).unwrap();
        assert!(h.frobenius_norm() <= 9.0 * alpha / 4.0 + 1e-9);
    }
}

#[test]
fn sparsity_metric_examples() {
    let zero = sparsity_metrics(&Mat64::zeros(3, 2));
    assert_eq!(zero.l0_fraction, 0.0);
    assert_eq!(zero.l1, 0.0);
    assert_eq!(zero.below_threshold, [1.0; 3]);

    let mut one = Mat64::zeros(2, 2);
    one[(1, 0)] = 5.0;
    let m = sparsity_metrics(&one);
    assert_eq!(m.l0_fraction, 0.25);
    assert_eq!(m.l1, 5.0);
    assert_eq!(m.below_threshold, [0.75; 3]);

    let mixed = Mat64::from_rows(&[vec![0.05, 0.3], vec![0.7, 2.0]]);
    assert_eq!(sparsity_metrics(&mixed).below_threshold, [0.75, 0.5, 0.25]);
}

#[test]
fn ista_outputs_have_exact_zeros() {
    use crate_core::blocks::ista::{ista_step, DictionaryParams};
    let mut r = rng(24);
    for _ in 0..10 {
        let z = randn(6, 5, &mut r);
        let dict = DictionaryParams {
            d: orthogonal(6, &mut r),
            eta: 0.1,
            lambda: 0.1,
        };
        let out = ista_step(&z, &dict).unwrap();
        assert!(sparsity_metrics(&out).l0_fraction < 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rates_are_nonnegative(seed in any::<u64>(), d in 2usize..9, n in 1usize..7, eps in 0.2f64..2.0) {
        let mut r = rng(seed);
        let z = randn(d, n, &mut r);
        let params = RateParams::with_epsilon(eps);
        let p = 1 + seed as usize % d;
        let u = SubspaceBasisSet::random(d, p, 2, &mut r).unwrap();
        prop_assert!(coding_rate(&z, &params).unwrap() >= 0.0);
        prop_assert!(coding_rate_subspaces(&z, &u, &params).unwrap() >= 0.0);
        prop_assert_eq!(coding_rate(&Mat64::zeros(d, n), &params).unwrap(), 0.0);
    }

    #[test]
    fn rates_are_rotation_invariant(seed in any::<u64>(), d in 2usize..9, n in 1usize..7) {
        let mut r = rng(seed);
        let z = randn(d, n, &mut r);
        let q = orthogonal(d, &mut r);
        let params = RateParams::with_epsilon(0.8);
        let u = SubspaceBasisSet::random(d, 1 + seed as usize % d, 3, &mut r).unwrap();
        let qz = q.matmul(&z).unwrap();
        let qu = u.rotated(&q).unwrap();
        let a = coding_rate(&z, &params).unwrap();
        let b = coding_rate(&qz, &params).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
        let a = rate_reduction(&z, &u, &params).unwrap();
        let b = rate_reduction(&qz, &qu, &params).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn hessian_is_symmetric(seed in any::<u64>(), d in 1usize..8, n in 1usize..7, eps in 0.3f64..1.5) {
        let mut r = rng(seed);
        let z = randn(d, n, &mut r);
        let d1 = randn(d, n, &mut r);
        let d2 = randn(d, n, &mut r);
        let params = RateParams::with_epsilon(eps);
        let a = d1.dot(&hessian_r_apply(&z, &d2, &params).unwrap()).unwrap();
        let b = d2.dot(&hessian_r_apply(&z, &d1, &params).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}
