//! Registry of gradient identities checked against autodiff and central
//! finite differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::model::{CrateModel, ModelSpec};
use crate::error::{Error, Result};
use crate::numeric::autodiff::{value_and_grad, Primitive, Tape, Var};
use crate::numeric::decomp::solve_spd;
use crate::numeric::matrix::Matrix;
use crate::numeric::rng::{normal_matrix, RngStream};
use crate::numeric::softmax::CausalConvention;
use crate::rate::{
    coding_rate_subspaces, grad_r, grad_rc_exact, grad_rc_neumann, hessian_r_apply, tape_coding_rate,
    tape_coding_rate_subspaces, RateParams, SubspaceBasisSet,
};
use crate::training::loss::{cross_entropy, smoothed_targets, tape_cross_entropy, tape_reconstruction_error};

pub type CheckFn = Box<dyn Fn(u64) -> Result<f64> + Send + Sync>;

/// One named check. `run(seed)` returns the measured quantity, which passes
/// when it is at most `tolerance`.
pub struct GradCheck {
    pub name: String,
    pub tolerance: f64,
    pub run: CheckFn,
}

impl GradCheck {
    pub fn new(name: impl Into<String>, tolerance: f64, run: impl Fn(u64) -> Result<f64> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            tolerance,
            run: Box::new(run),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn run_checks(registry: &[GradCheck], seed: u64) -> Result<Vec<CheckOutcome>> {
    if registry.is_empty() {
        return Err(Error::InvalidArgument("gradient-check registry is empty".into()));
    }
    registry
        .iter()
        .map(|c| {
            let measured = (c.run)(seed)?;
            Ok(CheckOutcome {
                name: c.name.clone(),
                measured,
                tolerance: c.tolerance,
                passed: measured <= c.tolerance,
            })
        })
        .collect()
}

/// Every built-in check.
pub fn default_registry() -> Vec<GradCheck> {
    let mut reg = vec![
        GradCheck::new("rc_closed_form_vs_autodiff", 1e-8, |s| rc_closed_form_vs_autodiff(s, 20)),
        GradCheck::new("rc_closed_form_vs_finite_difference", 1e-6, |s| rc_closed_form_vs_fd(s, 20)),
        GradCheck::new("r_closed_form_vs_autodiff", 1e-8, |s| r_closed_form_vs_autodiff(s, 20)),
        GradCheck::new("r_gradient_push_through", 1e-10, |s| r_push_through(s, 20)),
        GradCheck::new("r_hessian_vs_finite_difference", 1e-6, |s| hessian_vs_fd(s, 20)),
        GradCheck::new("r_hessian_symmetry", 1e-9, |s| hessian_asymmetry(s, 100)),
        GradCheck::new("r_hessian_lipschitz_bound", 1.0, |s| hessian_bound_ratio(s, 100)),
        GradCheck::new("rc_neumann_second_order", 0.2, |s| Ok((neumann_slope(s)? - 2.0).abs())),
        GradCheck::new("cross_entropy_vs_finite_difference", 1e-6, cross_entropy_vs_fd),
        GradCheck::new("classifier_loss_vs_finite_difference", 1e-4, |s| model_loss_vs_fd(s, false)),
        GradCheck::new("autoencoder_loss_vs_finite_difference", 1e-4, |s| model_loss_vs_fd(s, true)),
    ];
    for prim in Primitive::ALL {
        reg.push(GradCheck::new(format!("primitive_{}", prim.name()), 1e-5, move |s| {
            primitive_vs_fd(prim, s)
        }));
    }
    reg
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute difference when `b` vanishes.
pub fn relative_error(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let diff = a.sub(b).map(|d| d.frobenius_norm()).unwrap_or(f64::INFINITY);
    let scale = b.frobenius_norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Central differences of a scalar function of several matrices.
pub fn finite_difference(
    at: &[Matrix<f64>],
    h: f64,
    f: &dyn Fn(&[Matrix<f64>]) -> Result<f64>,
) -> Result<Vec<Matrix<f64>>> {
    let mut point = at.to_vec();
    let mut grads = Vec::with_capacity(at.len());
    for m in 0..at.len() {
        let mut g = Matrix::zeros(at[m].rows(), at[m].cols());
        for e in 0..at[m].len() {
            let orig = point[m].as_slice()[e];
            point[m].as_mut_slice()[e] = orig + h;
            let up = f(&point)?;
            point[m].as_mut_slice()[e] = orig - h;
            let down = f(&point)?;
            point[m].as_mut_slice()[e] = orig;
            g.as_mut_slice()[e] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// A random rate instance with `d ≤ 16`, `n ≤ 8`.
pub struct RateInstance {
    pub z: Matrix<f64>,
    pub bases: SubspaceBasisSet<f64>,
    pub params: RateParams<f64>,
}

pub fn random_rate_instance(rng: &mut ChaCha8Rng) -> Result<RateInstance> {
    let d = rng.random_range(2..=16);
    let n = rng.random_range(1..=8);
    let p = rng.random_range(1..=d.min(4));
    let k = rng.random_range(1..=4);
    let eps = rng.random_range(0.3..1.5);
    Ok(RateInstance {
        z: normal_matrix(d, n, 1.0, rng),
        bases: SubspaceBasisSet::random(d, p, k, rng)?,
        params: RateParams::with_epsilon(eps),
    })
}

fn instances(seed: u64, tag: u64, count: usize) -> Result<Vec<RateInstance>> {
    let root = RngStream::new(seed, tag);
    (0..count)
        .map(|i| random_rate_instance(&mut root.substream(i as u64).generator()))
        .collect()
}

fn max_over<I: IntoIterator<Item = Result<f64>>>(it: I) -> Result<f64> {
    it.into_iter().try_fold(0.0f64, |m, v| Ok(m.max(v?)))
}

pub fn rc_closed_form_vs_autodiff(seed: u64, count: usize) -> Result<f64> {
    max_over(instances(seed, 1, count)?.into_iter().map(|inst| {
        let mut inputs = vec![inst.z.clone()];
        inputs.extend(inst.bases.bases().iter().cloned());
        let (_, g) = value_and_grad(&inputs, |t, v| tape_coding_rate_subspaces(t, v[0], &v[1..], &inst.params))?;
        Ok(relative_error(&g[0], &grad_rc_exact(&inst.z, &inst.bases, &inst.params)?))
    }))
}

pub fn rc_closed_form_vs_fd(seed: u64, count: usize) -> Result<f64> {
    max_over(instances(seed, 2, count)?.into_iter().map(|inst| {
        let fd = finite_difference(std::slice::from_ref(&inst.z), 1e-5, &|m| {
            coding_rate_subspaces(&m[0], &inst.bases, &inst.params)
        })?;
        Ok(relative_error(&grad_rc_exact(&inst.z, &inst.bases, &inst.params)?, &fd[0]))
    }))
}

pub fn r_closed_form_vs_autodiff(seed: u64, count: usize) -> Result<f64> {
    max_over(instances(seed, 3, count)?.into_iter().map(|inst| {
        let (_, g) = value_and_grad(std::slice::from_ref(&inst.z), |t, v| tape_coding_rate(t, v[0], &inst.params))?;
        Ok(relative_error(&g[0], &grad_r(&inst.z, &inst.params)?))
    }))
}

/// `αZ(I + αZᵀZ)⁻¹ = α(I + αZZᵀ)⁻¹Z`.
pub fn r_push_through(seed: u64, count: usize) -> Result<f64> {
    max_over(instances(seed, 4, count)?.into_iter().map(|inst| {
        let z = &inst.z;
        let alpha = inst.params.alpha(z.rows(), z.cols());
        let mut outer = z.matmul_t(z)?.scale(alpha);
        for i in 0..z.rows() {
            outer[(i, i)] += 1.0;
        }
        let left = solve_spd(&outer, z)?.scale(alpha);
        Ok(relative_error(&grad_r(z, &inst.params)?, &left))
    }))
}

fn unit_direction(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let d: Matrix<f64> = normal_matrix(rows, cols, 1.0, rng);
    let norm = d.frobenius_norm();
    d.scale(1.0 / norm)
}

pub fn hessian_vs_fd(seed: u64, count: usize) -> Result<f64> {
    let root = RngStream::new(seed, 5);
    max_over(instances(seed, 5, count)?.into_iter().enumerate().map(|(i, inst)| {
        let mut rng = root.substream(i as u64).generator();
        let delta = unit_direction(inst.z.rows(), inst.z.cols(), &mut rng);
        let h = 1e-5;
        let mut up = inst.z.clone();
        up.axpy(h, &delta)?;
        let mut down = inst.z.clone();
        down.axpy(-h, &delta)?;
        let fd = grad_r(&up, &inst.params)?.sub(&grad_r(&down, &inst.params)?)?.scale(0.5 / h);
        Ok(relative_error(&hessian_r_apply(&inst.z, &delta, &inst.params)?, &fd))
    }))
}

/// Largest `|⟨Δ₁, HΔ₂⟩ − ⟨Δ₂, HΔ₁⟩|` over random unit pairs.
pub fn hessian_asymmetry(seed: u64, count: usize) -> Result<f64> {
    let root = RngStream::new(seed, 6);
    max_over(instances(seed, 6, count)?.into_iter().enumerate().map(|(i, inst)| {
        let mut rng = root.substream(i as u64).generator();
        let (r, c) = inst.z.shape();
        let d1 = unit_direction(r, c, &mut rng);
        let d2 = unit_direction(r, c, &mut rng);
        let a = d1.dot(&hessian_r_apply(&inst.z, &d2, &inst.params)?)?;
        let b = d2.dot(&hessian_r_apply(&inst.z, &d1, &inst.params)?)?;
        Ok((a - b).abs())
    }))
}

/// Largest `‖HΔ‖_F / (9α/4)` over random unit directions, one per instance.
pub fn hessian_bound_ratio(seed: u64, count: usize) -> Result<f64> {
    let root = RngStream::new(seed, 7);
    max_over(instances(seed, 7, count)?.into_iter().enumerate().map(|(i, inst)| {
        let mut rng = root.substream(i as u64).generator();
        let (r, c) = inst.z.shape();
        let alpha = inst.params.alpha(r, c);
        let delta = unit_direction(r, c, &mut rng);
        Ok(hessian_r_apply(&inst.z, &delta, &inst.params)?.frobenius_norm() / (2.25 * alpha))
    }))
}

/// Least-squares slope of `log(‖∇R^c − ∇̃R^c‖ / ‖∇R^c‖)` against
/// `log ‖X‖`, where `X = β(U_kᵀZ)ᵀ(U_kᵀZ)` is the term the Neumann series
/// expands in. `‖X‖` sweeps four decades, 1e-5 to 1e-1.
pub fn neumann_slope(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed, 8).generator();
    let (d, n, p, k) = (16, 8, 4, 2);
    let z0: Matrix<f64> = normal_matrix(d, n, 1.0, &mut rng);
    let bases = SubspaceBasisSet::random(d, p, k, &mut rng)?;
    let params = RateParams::with_epsilon(1.0);
    let beta = params.beta(p, n);
    let x_norm = |z: &Matrix<f64>| -> Result<f64> {
        max_over(bases.bases().iter().map(|u| {
            let proj = u.t_matmul(z)?;
            Ok(proj.t_matmul(&proj)?.frobenius_norm() * beta)
        }))
    };
    let base = x_norm(&z0)?;
    let mut points = Vec::new();
    for i in 0..=8 {
        let target = 10f64.powf(-5.0 + 0.5 * i as f64);
        let z = z0.scale((target / base).sqrt());
        let exact = grad_rc_exact(&z, &bases, &params)?;
        let approx = grad_rc_neumann(&z, &bases, &params)?;
        points.push((x_norm(&z)?.ln(), relative_error(&approx, &exact).ln()));
    }
    Ok(slope(&points))
}

/// Ordinary least-squares slope.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn cross_entropy_vs_fd(seed: u64) -> Result<f64> {
    let root = RngStream::new(seed, 9);
    max_over((0..10u64).map(|i| {
        let mut rng = root.substream(i).generator();
        let c = rng.random_range(2..=8);
        let logits: Matrix<f64> = normal_matrix(c, 1, 2.0, &mut rng);
        let target = smoothed_targets(rng.random_range(0..c), c, 0.1)?;
        let (_, g) = value_and_grad(std::slice::from_ref(&logits), |t, v| tape_cross_entropy(t, v[0], &target))?;
        let fd = finite_difference(&[logits], 1e-5, &|m| cross_entropy(&target, m[0].as_slice()))?;
        Ok(relative_error(&g[0], &fd[0]))
    }))
}

/// Whole-model loss gradient against central differences on 40 randomly
/// chosen parameter entries.
fn model_loss_vs_fd(seed: u64, autoencoder: bool) -> Result<f64> {
    let spec = if autoencoder {
        ModelSpec::autoencoder(1, 1, 6, 2, 3, 4, 5)
    } else {
        ModelSpec::classifier(2, 6, 2, 3, 4, 5, 3)
    };
    let model = CrateModel::<f64>::init(spec, seed)?;
    let mut rng = RngStream::new(seed, 10).generator();
    let x: Matrix<f64> = normal_matrix(5, 4, 1.0, &mut rng);
    let omega = vec![1, 3];
    let target = smoothed_targets(1, 3, 0.1)?;
    let loss_on = |m: &CrateModel<f64>, tape: &Tape<f64>, vars: &[Var]| -> Result<Var> {
        if autoencoder {
            let recon = m.tape_forward(tape, vars, &x, Some(&omega), None)?;
            tape_reconstruction_error(tape, recon, &x, &omega, false)
        } else {
            let logits = m.tape_forward(tape, vars, &x, None, None)?;
            tape_cross_entropy(tape, logits, &target)
        }
    };
    let tape = Tape::new();
    let vars = model.bind(&tape, true);
    let out = loss_on(&model, &tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let grads: Vec<Matrix<f64>> = vars.iter().map(|&v| grads.take(v)).collect();
    let value = |m: &CrateModel<f64>| -> Result<f64> {
        let tape = Tape::new();
        let vars = m.bind(&tape, false);
        let out = loss_on(m, &tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let h = 1e-6;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..40 {
        let t = rng.random_range(0..model.params().len());
        let e = rng.random_range(0..model.params()[t].len());
        let mut probe = model.clone();
        let orig = probe.params()[t].as_slice()[e];
        probe.params_mut()[t].as_mut_slice()[e] = orig + h;
        let up = value(&probe)?;
        probe.params_mut()[t].as_mut_slice()[e] = orig - h;
        let down = value(&probe)?;
        numeric.push((up - down) / (2.0 * h));
        analytic.push(grads[t].as_slice()[e]);
    }
    let a = Matrix::column_vector(&analytic);
    let n = Matrix::column_vector(&numeric);
    Ok(relative_error(&a, &n))
}

type Build = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

/// Inputs away from ReLU/abs kinks, entries of magnitude in `[0.2, 1.2]`.
fn kink_free(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.2..1.2);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn primitive_case(prim: Primitive, rng: &mut ChaCha8Rng) -> (Vec<Matrix<f64>>, Build) {
    let g = |r: usize, c: usize, rng: &mut ChaCha8Rng| -> Matrix<f64> { normal_matrix(r, c, 1.0, rng) };
    match prim {
        Primitive::MatMul => (vec![g(3, 4, rng), g(4, 2, rng)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        Primitive::Add => (vec![g(3, 2, rng), g(3, 2, rng)], Box::new(|t, v| t.add(v[0], v[1]))),
        Primitive::Sub => (vec![g(3, 2, rng), g(3, 2, rng)], Box::new(|t, v| t.sub(v[0], v[1]))),
        Primitive::Mul => (vec![g(3, 2, rng), g(3, 2, rng)], Box::new(|t, v| t.mul(v[0], v[1]))),
        Primitive::Scale => (vec![g(3, 2, rng)], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        Primitive::Offset => (vec![g(3, 2, rng)], Box::new(|t, v| Ok(t.offset(v[0], 0.4)))),
        Primitive::Transpose => (vec![g(3, 2, rng)], Box::new(|t, v| Ok(t.transpose(v[0])))),
        Primitive::SoftmaxColumns => (vec![g(4, 3, rng)], Box::new(|t, v| t.softmax_columns(v[0]))),
        Primitive::LogSoftmaxColumns => (vec![g(4, 3, rng)], Box::new(|t, v| t.log_softmax_columns(v[0]))),
        Primitive::CausalMask => (
            vec![g(4, 4, rng)],
            Box::new(|t, v| {
                let masked = t.causal_mask(v[0], CausalConvention::Literal)?;
                t.softmax_columns(masked)
            }),
        ),
        Primitive::LogdetGram => (vec![g(4, 3, rng)], Box::new(|t, v| t.logdet_gram(v[0], 0.8))),
        Primitive::Relu => (vec![kink_free(3, 3, rng)], Box::new(|t, v| Ok(t.relu(v[0])))),
        Primitive::Abs => (vec![kink_free(3, 3, rng)], Box::new(|t, v| Ok(t.abs(v[0])))),
        Primitive::LayerNorm => (
            vec![g(5, 3, rng), g(5, 1, rng), g(5, 1, rng)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        Primitive::Sum => (vec![g(3, 2, rng)], Box::new(|t, v| Ok(t.sum(v[0])))),
        Primitive::Columns => (vec![g(3, 5, rng)], Box::new(|t, v| t.columns(v[0], 1, 3))),
        Primitive::Rows => (vec![g(5, 3, rng)], Box::new(|t, v| t.rows(v[0], 2, 2))),
        Primitive::HCat => (vec![g(3, 2, rng), g(3, 1, rng)], Box::new(|t, v| t.hcat(v))),
        Primitive::VCat => (vec![g(2, 3, rng), g(1, 3, rng)], Box::new(|t, v| t.vcat(v))),
        Primitive::AddColumn => (vec![g(3, 4, rng), g(3, 1, rng)], Box::new(|t, v| t.add_column(v[0], v[1]))),
    }
}

/// `Σ W ∘ prim(inputs)` for a fixed random `W`, autodiff against central
/// differences.
pub fn primitive_vs_fd(prim: Primitive, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed, 11).substream(prim as u64).generator();
    let (inputs, build) = primitive_case(prim, &mut rng);
    let shape = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
        tape.shape(build(&tape, &vars)?)
    };
    let weights: Matrix<f64> = normal_matrix(shape.0, shape.1, 1.0, &mut rng);
    let objective = |t: &Tape<f64>, v: &[Var]| -> Result<Var> {
        let out = build(t, v)?;
        let w = t.constant(weights.clone());
        let prod = t.mul(out, w)?;
        Ok(t.sum(prod))
    };
    let (_, grads) = value_and_grad(&inputs, objective)?;
    let fd = finite_difference(&inputs, 1e-6, &|m| Ok(value_and_grad(m, objective)?.0))?;
    max_over(grads.iter().zip(&fd).map(|(a, n)| Ok(relative_error(a, n))))
}
