mod common;

use common::*;
use crate_core::diagnostics::gradcheck::primitive_vs_fd;
use crate_core::numeric::autodiff::Primitive;
use crate_core::numeric::decomp::{cholesky_posdef, logdet_gram, shifted_gram};
use crate_core::numeric::softmax::{causal_mask, softmax_columns, CausalConvention};
use crate_core::numeric::rng::normal_matrix;
use crate_core::{value_and_grad, Error, Mat64, RngStream};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn cholesky_identity_and_diagonal() {
    let l = cholesky_posdef(&Mat64::identity(3)).unwrap();
    assert_eq!(l, Mat64::identity(3));
    let l = cholesky_posdef(&Mat64::diag(&[4.0, 9.0])).unwrap();
    assert_eq!(l, Mat64::diag(&[2.0, 3.0]));
}

#[test]
fn cholesky_residual_on_shifted_gram() {
    let mut r = rng(1);
    for _ in 0..10 {
        let g = randn(5, 3, &mut r);
        let a = shifted_gram(&g, 1.0);
        let l = cholesky_posdef(&a).unwrap();
        for i in 0..l.rows() {
            for j in i + 1..l.cols() {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
        let back = l.matmul_t(&l).unwrap();
        assert!(rel(&back, &a) <= 1e-12);
    }
}

#[test]
fn cholesky_rejects_indefinite() {
    let a = Mat64::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
    assert!(matches!(cholesky_posdef(&a), Err(Error::NotPositiveDefinite { .. })));
}

#[test]
fn logdet_examples() {
    for (r, c) in [(3, 5), (4, 2), (1, 1)] {
        assert_eq!(logdet_gram(&Mat64::zeros(r, c), 2.5).unwrap(), 0.0);
    }
    let v = logdet_gram(&Mat64::identity(2), 3.0).unwrap();
    assert_close(v, 2.0 * 4f64.ln(), 1e-14);
}

#[test]
fn logdet_matches_svd_oracle() {
    let mut r = rng(2);
    for _ in 0..10 {
        let z = randn(6, 4, &mut r);
        assert_close(logdet_gram(&z, 0.7).unwrap(), logdet_oracle(&z, 0.7), 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let one = softmax_columns(&Mat64::from_rows(&[vec![-3.7]])).unwrap();
    assert_eq!(one[(0, 0)], 1.0);
    let half = softmax_columns(&Mat64::column_vector(&[0.0, 0.0])).unwrap();
    assert_eq!(half.as_slice(), &[0.5, 0.5]);
    let q = softmax_columns(&Mat64::column_vector(&[0.0, 3f64.ln()])).unwrap();
    assert_close(q[(0, 0)], 0.25, 1e-15);
    assert_close(q[(1, 0)], 0.75, 1e-15);
}

#[test]
fn softmax_survives_huge_logits() {
    let s = softmax_columns(&Mat64::column_vector(&[1000.0, 1000.0, -1000.0])).unwrap();
    assert_close(s[(0, 0)], 0.5, 1e-15);
    assert_eq!(s[(2, 0)], 0.0);
}

#[test]
fn fully_masked_column_is_an_error() {
    let a = Mat64::column_vector(&[f64::NEG_INFINITY, f64::NEG_INFINITY]);
    assert!(matches!(softmax_columns(&a), Err(Error::DegenerateColumn(0))));
}

#[test]
fn causal_mask_examples() {
    let one = Mat64::from_rows(&[vec![1.5]]);
    assert_eq!(causal_mask(&one, CausalConvention::Literal).unwrap(), one);

    let a = Mat64::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    let m = causal_mask(&a, CausalConvention::Literal).unwrap();
    assert_eq!(m[(0, 0)], 1.0);
    assert_eq!(m[(0, 1)], 2.0);
    assert_eq!(m[(1, 0)], f64::NEG_INFINITY);
    assert_eq!(m[(1, 1)], 4.0);

    let s = softmax_columns(&m).unwrap();
    assert_eq!(s.column(0), vec![1.0, 0.0]);

    let t = causal_mask(&a, CausalConvention::Transposed).unwrap();
    assert_eq!(t[(0, 1)], f64::NEG_INFINITY);
    assert_eq!(t[(1, 0)], 3.0);
}

#[test]
fn rng_streams_are_reproducible() {
    let s = RngStream::new(42, 7);
    let a: Mat64 = normal_matrix(4, 5, 1.0, &mut s.generator());
    let b: Mat64 = normal_matrix(4, 5, 1.0, &mut s.generator());
    assert_eq!(a, b);
    let other: Mat64 = normal_matrix(4, 5, 1.0, &mut RngStream::new(42, 8).generator());
    assert_ne!(a, other);
    assert_ne!(s.substream(0), s.substream(1));
    assert_eq!(s.substream(3), s.substream(3));
}

#[test]
fn rng_counter_positions_match_sequential_draws() {
    let s = RngStream::new(9, 1);
    let mut seq = s.generator();
    let first: u32 = seq.random();
    let second: u32 = seq.random();
    let mut jumped = s.generator_at(1);
    let direct: u32 = jumped.random();
    assert_ne!(first, second);
    assert_eq!(second, direct);
}

#[test]
fn rng_is_thread_independent() {
    let s = RngStream::new(5, 0);
    let here: Mat64 = normal_matrix(3, 3, 1.0, &mut s.substream(11).generator());
    let there = std::thread::spawn(move || normal_matrix::<f64, _>(3, 3, 1.0, &mut s.substream(11).generator()))
        .join()
        .unwrap();
    assert_eq!(here, there);
}

#[test]
fn value_and_grad_quadratic() {
    let x = Mat64::column_vector(&[1.0, 2.0]);
    let (v, g) = value_and_grad(&[x], |t, p| {
        let sq = t.mul(p[0], p[0])?;
        Ok(t.scale(t.sum(sq), 0.5))
    })
    .unwrap();
    assert_eq!(v, 2.5);
    assert_eq!(g[0].as_slice(), &[1.0, 2.0]);
}

#[test]
fn logdet_gradient_vanishes_at_origin() {
    let (v, g) = value_and_grad(&[Mat64::zeros(4, 3)], |t, p| t.logdet_gram(p[0], 0.8)).unwrap();
    assert_eq!(v, 0.0);
    assert_eq!(g[0].max_abs(), 0.0);
}

#[test]
fn logdet_gradient_matches_closed_form() {
    let mut r = rng(3);
    let alpha = 0.9;
    for _ in 0..5 {
        let z = randn(4, 3, &mut r);
        let (_, g) = value_and_grad(std::slice::from_ref(&z), |t, p| t.logdet_gram(p[0], alpha)).unwrap();
        let m = shifted_gram(&z, alpha);
        let expect = z.matmul(&na_inverse(&m)).unwrap().scale(2.0 * alpha);
        assert!(rel(&g[0], &expect) <= 1e-8, "{}", rel(&g[0], &expect));
    }
}

#[test]
fn gradient_of_a_constant_is_zero() {
    let (_, g) = value_and_grad(&[Mat64::filled(2, 2, 3.0)], |t, p| {
        let c = t.constant(Mat64::filled(2, 2, 1.0));
        let prod = t.mul(c, c)?;
        let out = t.sum(prod);
        let _ = p;
        Ok(out)
    })
    .unwrap();
    assert_eq!(g[0], Mat64::zeros(2, 2));
}

#[test]
fn shared_subexpressions_accumulate() {
    // f(x) = sum(x ⊙ x + x), grad = 2x + 1; x feeds three edges.
    let x = Mat64::column_vector(&[0.5, -1.5, 2.0]);
    let (_, g) = value_and_grad(std::slice::from_ref(&x), |t, p| {
        let sq = t.mul(p[0], p[0])?;
        let s = t.add(sq, p[0])?;
        Ok(t.sum(s))
    })
    .unwrap();
    assert_eq!(g[0], x.map(|v| 2.0 * v + 1.0));
}

#[test]
fn unknown_primitive_is_rejected_before_recording() {
    let tape = crate_core::Tape64::new();
    let a = tape.param(Mat64::identity(2));
    let before = tape.len();
    let err = tape.apply("conv2d", &[a]).unwrap_err();
    assert!(matches!(err, Error::UnregisteredPrimitive(ref name) if name == "conv2d"));
    assert_eq!(tape.len(), before);
    assert!(tape.apply("matmul", &[a, a]).is_ok());
}

#[test]
fn non_scalar_objective_is_rejected() {
    let r = value_and_grad(&[Mat64::identity(2)], |_, p| Ok(p[0]));
    assert!(matches!(r, Err(Error::ShapeMismatch(_))));
}

/// Independent per-primitive check: every registered primitive, composed
/// with a fixed random weighting, against central differences.
#[test]
fn every_primitive_matches_finite_differences() {
    for prim in Primitive::ALL {
        for seed in 0..3 {
            let err = primitive_vs_fd(prim, seed).unwrap();
            assert!(err <= 1e-5, "{}: {err:e}", prim.name());
        }
    }
}

fn weighted<F>(x: &Mat64, w: &Mat64, build: F) -> (Mat64, Mat64)
where
    F: Fn(&crate_core::Tape64, crate_core::Var) -> crate_core::Result<crate_core::Var> + Copy,
{
    let (_, g) = value_and_grad(std::slice::from_ref(x), |t, p| {
        let y = build(t, p[0])?;
        let wv = t.constant(w.clone());
        let prod = t.mul(y, wv)?;
        Ok(t.sum(prod))
    })
    .unwrap();
    let fd = fd_grad(x, 1e-5, |xx| {
        let (v, _) = value_and_grad(std::slice::from_ref(xx), |t, p| {
            let y = build(t, p[0])?;
            let wv = t.constant(w.clone());
            let prod = t.mul(y, wv)?;
            Ok(t.sum(prod))
        })
        .unwrap();
        v
    });
    (g[0].clone(), fd)
}

#[test]
fn composite_primitives_against_central_differences() {
    let mut r = rng(4);
    let x = randn(4, 3, &mut r);
    let w = randn(4, 3, &mut r);
    let (g, fd) = weighted(&x, &w, |t, v| {
        let s = t.softmax_columns(v)?;
        let n = t.layer_norm(s, t.constant(Mat64::filled(4, 1, 1.3)), t.constant(Mat64::filled(4, 1, 0.2)), 1e-5)?;
        Ok(t.abs(n))
    });
    assert!(rel(&g, &fd) <= 1e-5, "{}", rel(&g, &fd));

    let w3 = randn(3, 3, &mut r);
    let (g, fd) = weighted(&x, &w3, |t, v| {
        let vt = t.transpose(v);
        let gram = t.matmul(vt, v)?;
        let masked = t.causal_mask(gram, CausalConvention::Literal)?;
        t.softmax_columns(masked)
    });
    assert!(rel(&g, &fd) <= 1e-5, "{}", rel(&g, &fd));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logdet_transpose_invariant(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8, scale in 0.01f64..5.0) {
        let z = randn(rows, cols, &mut rng(seed));
        let a = logdet_gram(&z, scale).unwrap();
        let b = logdet_gram(&z.transpose(), scale).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn softmax_columns_are_distributions(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..6, spread in 0.1f64..50.0) {
        let a = randn(rows, cols, &mut rng(seed)).scale(spread);
        let s = softmax_columns(&a).unwrap();
        for c in 0..cols {
            let col = s.column(c);
            prop_assert!(col.iter().all(|v| *v >= 0.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn seeded_draws_are_bit_identical(seed in any::<u64>(), stream in any::<u64>()) {
        let s = RngStream::new(seed, stream);
        let a: Mat64 = normal_matrix(3, 4, 1.0, &mut s.generator());
        let b: Mat64 = normal_matrix(3, 4, 1.0, &mut s.generator());
        prop_assert_eq!(a, b);
    }
}
