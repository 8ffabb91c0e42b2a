//! The two practical reward solvers: the covariance heuristic and the
//! implicit-differentiation hypergradient loop.
//!
//! The implicit solver treats the trained policy θ*(φ) as an implicit
//! function of the reward parameters φ through the stationarity of the inner
//! gradient. One conjugate-gradient solve against the inner Hessian and one
//! mixed second derivative then give the outer gradient without ever
//! unrolling the inner optimization; the inner learning rate cancels and
//! never appears.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    cross_grad, grad_theta, gradient, hvp_theta, loss_value, AutodiffError,
    BilevelFn, DiffFn, ParamVector,
};
use crate::data::{sample_covariance, DataError, Dataset};
use crate::linalg::Matrix;
use crate::models::GaussianPolicy;
use crate::objectives::{
    Estimator, GaussianNll, GaussianPg, GaussianPgInner, ObjectiveError, PgConfig, RewardKind,
    RewardParams,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum BilevelError {
    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("conjugate gradient broke down at iteration {iter} (non-finite or indefinite)")]
    BreakdownNonFinite { iter: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss during bilevel solve")]
    NonFiniteLoss { trace: BilevelTrace },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Configuration of the implicit-differentiation solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BilevelConfig {
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub outer_lr: f64,
    pub inner_lr: f64,
    /// 0 means auto: min(d_θ, 100).
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    pub lambda: f64,
    pub warm_start: bool,
    pub mc_samples: usize,
    pub inner_optimizer: OptimizerKind,
    pub outer_optimizer: OptimizerKind,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            outer_iters: 100,
            inner_iters: 50,
            outer_lr: 1e-2,
            inner_lr: 1e-2,
            cg_max_iters: 0,
            cg_tol: 1e-5,
            lambda: 1.0,
            warm_start: true,
            mc_samples: 8,
            inner_optimizer: OptimizerKind::Adam,
            outer_optimizer: OptimizerKind::Adam,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<(), BilevelError> {
        if self.inner_iters == 0 {
            return Err(BilevelError::InvalidConfig("inner_iters must be positive".into()));
        }
        if !(self.outer_lr > 0.0 && self.inner_lr > 0.0) {
            return Err(BilevelError::InvalidConfig("learning rates must be positive".into()));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(BilevelError::InvalidConfig("cg_tol must be in (0, 1)".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(BilevelError::InvalidConfig("lambda must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(BilevelError::InvalidConfig("mc_samples must be positive".into()));
        }
        Ok(())
    }

    fn cg_max(&self, d_theta: usize) -> usize {
        if self.cg_max_iters == 0 {
            d_theta.min(100)
        } else {
            self.cg_max_iters
        }
    }
}

/// One record per outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// Realized reward parameters (u, or the diagonal).
    pub phi: Vec<f64>,
    pub outer_nll: f64,
    pub hypergrad_norm: f64,
    pub cg_residual: f64,
    pub cg_iters: usize,
    pub stationarity_warning: bool,
}

#[derive(Debug, Clone, Default)]
pub struct BilevelTrace {
    pub records: Vec<TraceRecord>,
}

impl BilevelTrace {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut file = std::fs::File::create(path)?;
        for r in &self.records {
            writeln!(file, "{}", serde_json::to_string(r).expect("trace serializes"))?;
        }
        Ok(())
    }
}

/// Algorithm: estimate Σ̂ from the raw targets, ridge it, and return the
/// canonical isotropic reward u = λn/(2 Tr Σ̂).
pub fn heuristic_reward(data: &Dataset, lambda: f64) -> Result<RewardParams, BilevelError> {
    let idx: Vec<usize> = (0..data.rows()).collect();
    heuristic_reward_rows(&data.targets_rows(&idx), lambda)
}

/// Same heuristic over an explicit target matrix (one row per sample).
pub fn heuristic_reward_rows(targets: &Matrix, lambda: f64) -> Result<RewardParams, BilevelError> {
    if targets.rows() < 2 {
        return Err(BilevelError::TooFewSamples { need: 2, got: targets.rows() });
    }
    let n = targets.cols();
    let mut cov = sample_covariance(targets)?;
    for i in 0..n {
        cov.set(i, i, cov.get(i, i) + 1e-6);
    }
    let trace = cov.trace().expect("square");
    let u = lambda * n as f64 / (2.0 * trace);
    Ok(RewardParams::scalar_isotropic(n, u))
}

/// Ablation variant: covariance of least-squares residuals instead of raw
/// targets; removes the Λ·Cov(X)·Λᵀ inflation the marginal estimate carries.
pub fn heuristic_reward_residual(data: &Dataset, lambda: f64) -> Result<RewardParams, BilevelError> {
    let idx: Vec<usize> = (0..data.rows()).collect();
    let xs = data.inputs_rows(&idx);
    let ys = data.targets_rows(&idx);
    if xs.rows() < 2 {
        return Err(BilevelError::TooFewSamples { need: 2, got: xs.rows() });
    }
    // ridge-regularized normal equations with an intercept column
    let n_rows = xs.rows();
    let m = xs.cols() + 1;
    let aug = Matrix::from_fn(n_rows, m, |i, j| if j < xs.cols() { xs.get(i, j) } else { 1.0 });
    let mut gram = aug.transpose().matmul(&aug).unwrap();
    for i in 0..m {
        gram.set(i, i, gram.get(i, i) + 1e-8);
    }
    let chol = gram.cholesky().map_err(|_| BilevelError::InvalidConfig("degenerate design".into()))?;
    let aty = aug.transpose().matmul(&ys).unwrap();
    let mut w = Matrix::zeros(m, ys.cols());
    for j in 0..ys.cols() {
        let col = crate::linalg::Vector::new((0..m).map(|i| aty.get(i, j)).collect());
        let sol = chol.solve(&col).unwrap();
        for i in 0..m {
            w.set(i, j, sol[i]);
        }
    }
    let fitted = aug.matmul(&w).unwrap();
    let resid = ys.sub(&fitted).unwrap();
    heuristic_reward_rows(&resid, lambda)
}

#[derive(Debug, Clone, Copy)]
pub struct CgConfig {
    pub max_iters: usize,
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub solution: Vec<f64>,
    /// Final true residual ‖A·x − b‖ / ‖b‖.
    pub residual: f64,
    pub iters: usize,
}

/// Conjugate gradient on a symmetric positive-definite operator given only
/// matrix-vector products. Stops at ‖r‖ ≤ tol·‖b‖ or max_iters; hitting the
/// cap is reported, not fatal.
pub fn cg_solve<E>(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
    rhs: &[f64],
    cfg: CgConfig,
) -> Result<CgResult, BilevelError>
where
    BilevelError: From<E>,
{
    let dim = rhs.len();
    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rhs_norm == 0.0 {
        return Ok(CgResult { solution: vec![0.0; dim], residual: 0.0, iters: 0 });
    }
    let mut x = vec![0.0; dim];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rs_old: f64 = r.iter().map(|v| v * v).sum();
    let mut iters = 0;

    for k in 0..cfg.max_iters {
        let ap = apply(&p)?;
        if ap.iter().any(|v| !v.is_finite()) {
            return Err(BilevelError::BreakdownNonFinite { iter: k });
        }
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !pap.is_finite() || pap <= 0.0 {
            return Err(BilevelError::BreakdownNonFinite { iter: k });
        }
        let alpha = rs_old / pap;
        for i in 0..dim {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(BilevelError::BreakdownNonFinite { iter: k });
        }
        iters = k + 1;
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        if rs_new.sqrt() <= cfg.tol * rhs_norm {
            break;
        }
        let beta = rs_new / rs_old;
        for i in 0..dim {
            p[i] = r[i] + beta * p[i];
        }
        rs_old = rs_new;
    }

    let final_apply = apply(&x)?;
    let residual = final_apply
        .iter()
        .zip(rhs)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        / rhs_norm;
    Ok(CgResult { solution: x, residual, iters })
}

/// Stationarity premise for the implicit function theorem:
/// ‖∇_θ L_in‖ ≤ tol·(1 + ‖θ‖) warns (never aborts) when violated.
pub const STATIONARITY_TOL: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct Hypergradient {
    pub grad_phi: Vec<f64>,
    pub cg_residual: f64,
    pub cg_iters: usize,
    pub stationarity_warning: bool,
    pub inner_grad_norm: f64,
}

/// Implicit hypergradient of `outer` with respect to φ at an approximately
/// stationary θ*: solves ∇²_θL_in · v = ∇_θL_out by CG, then returns
/// −∇_φ⟨∇_θL_in, v⟩.
pub fn hypergradient(
    inner: &impl BilevelFn,
    outer: &impl DiffFn,
    phi: &ParamVector,
    theta_star: &ParamVector,
    cfg: CgConfig,
) -> Result<Hypergradient, BilevelError> {
    let g_out = gradient(outer, theta_star)?;
    let g_in = grad_theta(inner, phi, theta_star)?;
    let inner_grad_norm = g_in.iter().map(|v| v * v).sum::<f64>().sqrt();
    let theta_norm = theta_star.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    let stationarity_warning = inner_grad_norm > STATIONARITY_TOL * (1.0 + theta_norm);

    let cg = cg_solve(
        |w| hvp_theta(inner, phi, theta_star, w).map_err(BilevelError::from),
        &g_out,
        cfg,
    )?;
    let cross = cross_grad(inner, phi, theta_star, &cg.solution)?;
    Ok(Hypergradient {
        grad_phi: cross.iter().map(|v| -v).collect(),
        cg_residual: cg.residual,
        cg_iters: cg.iters,
        stationarity_warning,
        inner_grad_norm,
    })
}

/// The implicit-differentiation solver: alternates inner policy-gradient
/// training with one outer hypergradient step on the reward parameters
/// (optimized in log space). Returns the final reward, the final policy, and
/// the full per-outer-iteration trace.
pub fn solve_bilevel(
    data: &Dataset,
    policy: GaussianPolicy,
    reward_init: RewardParams,
    cfg: &BilevelConfig,
    rng: &mut RngStream,
) -> Result<(RewardParams, GaussianPolicy, BilevelTrace), BilevelError> {
    cfg.validate()?;
    match reward_init.kind() {
        RewardKind::ScalarIsotropic | RewardKind::Diagonal => {}
        RewardKind::Full => {
            return Err(BilevelError::InvalidConfig(
                "the outer loop optimizes scalar-isotropic or diagonal rewards only".into(),
            ));
        }
    }
    if reward_init.dim() != policy.output_dim() {
        return Err(BilevelError::InvalidConfig(format!(
            "reward dim {} vs policy output dim {}",
            reward_init.dim(),
            policy.output_dim()
        )));
    }

    let xs = data.inputs_rows(&data.split.train);
    let ys = data.targets_rows(&data.split.train);
    let pg_cfg = PgConfig::new(cfg.lambda, cfg.mc_samples, Estimator::Reparameterized)?;

    let mut policy = policy;
    let mut reward = reward_init;
    let mut trace = BilevelTrace::default();
    let theta_init = policy.params().clone();
    let mut inner_opt =
        Optimizer::new(cfg.inner_optimizer, cfg.inner_lr, policy.params().len());

    let inner_train = |policy: &mut GaussianPolicy,
                           reward: &RewardParams,
                           opt: &mut Optimizer,
                           rng: &mut RngStream|
     -> Result<(), BilevelError> {
        for _ in 0..cfg.inner_iters {
            let grad = {
                let loss = GaussianPg::new(policy, &xs, &ys, reward, pg_cfg, rng)?;
                gradient(&loss, policy.params())?
            };
            opt.step(policy.params_mut().values_mut(), &grad)
                .map_err(|_| BilevelError::Autodiff(AutodiffError::NonFiniteLoss))?;
            policy.project_logvar();
        }
        Ok(())
    };

    fn is_nonfinite(e: &BilevelError) -> bool {
        matches!(e, BilevelError::Autodiff(AutodiffError::NonFiniteLoss))
            || matches!(
                e,
                BilevelError::Objective(ObjectiveError::Autodiff(AutodiffError::NonFiniteLoss))
            )
    }

    // converge the policy under the initial reward; with zero outer
    // iterations this is exactly plain PG training
    if let Err(e) = inner_train(&mut policy, &reward, &mut inner_opt, rng) {
        return Err(if is_nonfinite(&e) {
            BilevelError::NonFiniteLoss { trace: BilevelTrace::default() }
        } else {
            e
        });
    }

    if cfg.outer_iters == 0 {
        return Ok((reward, policy, trace));
    }

    let cg_cfg = CgConfig { max_iters: cfg.cg_max(policy.params().len()), tol: cfg.cg_tol };
    let mut outer_opt =
        Optimizer::new(cfg.outer_optimizer, cfg.outer_lr, reward.params().len());

    let eval_state = |policy: &GaussianPolicy,
                      reward: &RewardParams,
                      rng: &mut RngStream|
     -> Result<(f64, Hypergradient), BilevelError> {
        let outer = GaussianNll::new(policy, &xs, &ys)?;
        let nll = loss_value(&outer, policy.params())?;
        // common random numbers: the hypergradient's HVP, cross term, and
        // stationarity check all see the same frozen noise
        let noise: Vec<Matrix> = (0..cfg.mc_samples)
            .map(|_| Matrix::from_fn(xs.rows(), ys.cols(), |_, _| rng.normal()))
            .collect();
        let pg = GaussianPg::with_noise(policy, &xs, &ys, reward, pg_cfg, noise)?;
        let inner = GaussianPgInner(pg);
        let h = hypergradient(&inner, &outer, reward.params(), policy.params(), cg_cfg)?;
        Ok((nll, h))
    };

    let abort = |trace: &BilevelTrace| BilevelError::NonFiniteLoss { trace: trace.clone() };

    let (nll0, mut hyper) = match eval_state(&policy, &reward, rng) {
        Ok(v) => v,
        Err(e) if is_nonfinite(&e) => return Err(abort(&trace)),
        Err(e) => return Err(e),
    };
    trace.records.push(TraceRecord {
        iter: 0,
        phi: reward.u_summary(),
        outer_nll: nll0,
        hypergrad_norm: hyper.grad_phi.iter().map(|v| v * v).sum::<f64>().sqrt(),
        cg_residual: hyper.cg_residual,
        cg_iters: hyper.cg_iters,
        stationarity_warning: hyper.stationarity_warning,
    });

    for k in 1..=cfg.outer_iters {
        if outer_opt.step(reward.params_mut().values_mut(), &hyper.grad_phi).is_err() {
            return Err(abort(&trace));
        }

        if !cfg.warm_start {
            policy.params_mut().set_values(theta_init.values()).expect("same layout");
            inner_opt = Optimizer::new(cfg.inner_optimizer, cfg.inner_lr, policy.params().len());
        }
        if let Err(e) = inner_train(&mut policy, &reward, &mut inner_opt, rng) {
            return Err(if is_nonfinite(&e) { abort(&trace) } else { e });
        }

        let (nll, h) = match eval_state(&policy, &reward, rng) {
            Ok(v) => v,
            Err(e) if is_nonfinite(&e) => return Err(abort(&trace)),
            Err(e) => return Err(e),
        };
        hyper = h;
        if !nll.is_finite() {
            return Err(abort(&trace));
        }
        trace.records.push(TraceRecord {
            iter: k,
            phi: reward.u_summary(),
            outer_nll: nll,
            hypergrad_norm: hyper.grad_phi.iter().map(|v| v * v).sum::<f64>().sqrt(),
            cg_residual: hyper.cg_residual,
            cg_iters: hyper.cg_iters,
            stationarity_warning: hyper.stationarity_warning,
        });
    }

    Ok((reward, policy, trace))
}
