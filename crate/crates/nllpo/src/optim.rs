//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameters became non-finite after a step")]
    NonFiniteParams,
    #[error("gradient length {got} does not match parameter length {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr }),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, dim)),
        }
    }

    /// One descent step in place; fails if any parameter leaves ℝ.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), OptimError> {
        if grad.len() != params.len() {
            return Err(OptimError::LengthMismatch { expected: params.len(), got: grad.len() });
        }
        match self {
            Optimizer::Sgd(s) => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= s.lr * g;
                }
            }
            Optimizer::Adam(a) => {
                a.t += 1;
                let bc1 = 1.0 - a.beta1.powi(a.t as i32);
                let bc2 = 1.0 - a.beta2.powi(a.t as i32);
                for i in 0..params.len() {
                    a.m[i] = a.beta1 * a.m[i] + (1.0 - a.beta1) * grad[i];
                    a.v[i] = a.beta2 * a.v[i] + (1.0 - a.beta2) * grad[i] * grad[i];
                    let m_hat = a.m[i] / bc1;
                    let v_hat = a.v[i] / bc2;
                    params[i] -= a.lr * m_hat / (v_hat.sqrt() + a.eps);
                }
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(OptimError::NonFiniteParams);
        }
        Ok(())
    }
}
