//! SGD with momentum and Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// `v ← μv + g`, `θ ← θ − lr·v`.
    Sgd { lr: f64, momentum: f64 },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match *self {
            OptimizerConfig::Sgd { lr, momentum } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return bad(format!("learning rate {lr} must be positive"));
                }
                if !(0.0..1.0).contains(&momentum) {
                    return bad(format!("momentum {momentum} outside [0, 1)"));
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return bad(format!("learning rate {lr} must be positive"));
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return bad(format!("Adam betas ({beta1}, {beta2}) outside [0, 1)"));
                }
                if !(eps > 0.0) {
                    return bad(format!("Adam eps {eps} must be positive"));
                }
                if !(weight_decay >= 0.0) {
                    return bad(format!("weight decay {weight_decay} must be nonnegative"));
                }
            }
        }
        Ok(())
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar> {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &[Matrix<T>]) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect::<Vec<_>>();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Ok(Self {
            config,
            step: 0,
            first: zeros(),
            second,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return shape_err(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            ));
        }
        for ((p, g), state) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != state.shape() {
                return shape_err(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                let (lr, mu) = (T::lit(lr), T::lit(momentum));
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pi, &gi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
                        *vi = mu * *vi + gi;
                        *pi -= lr * *vi;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.step as i32;
                let c1 = T::lit(1.0 - beta1.powi(t));
                let c2 = T::lit(1.0 - beta2.powi(t));
                let (lr, b1, b2, eps, wd) = (T::lit(lr), T::lit(beta1), T::lit(beta2), T::lit(eps), T::lit(weight_decay));
                let one = T::one();
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let it = p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice());
                    for (((pi, &gi), mi), vi) in it {
                        *mi = b1 * *mi + (one - b1) * gi;
                        *vi = b2 * *vi + (one - b2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *pi -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pi);
                    }
                }
            }
        }
        Ok(())
    }
}
