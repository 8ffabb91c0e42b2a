//! Analytic solutions of the tractable linear-Gaussian case, and the
//! differentiable objectives used to validate every iterative solver
//! against them.
//!
//! With data Y|X ~ N(ΛX, Σ), reward r_U(ŷ,y) = −(ŷ−y)ᵀU(ŷ−y), and entropy
//! weight λ, the inner problem has the unique maximizer θ*(U) = (Λ, λU⁻¹/2)
//! and the outer problem is uniquely solved by U* = (λ/2)Σ⁻¹. In the
//! isotropic-model case the solution set is characterized by
//! Tr(U) = λn²/(2 Tr Σ).

use crate::autodiff::{
    AutodiffError, BilevelFn, Bound, DiffFn, NodeId, ParamVector, Scalar, SegmentId, Tape,
};
use crate::linalg::{LinalgError, Matrix, SpdMatrix};
use crate::models::{LinearGaussianTruth, LOG_TAU};

/// The unique inner-level maximizer θ*(U) = (Λ, λU⁻¹/2).
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub a_star: Matrix,
    pub b_star: SpdMatrix,
}

/// The unique outer solution U* = (λ/2)·Σ⁻¹.
pub fn optimal_reward(sigma: &SpdMatrix, lambda: f64) -> Result<SpdMatrix, LinalgError> {
    assert!(lambda > 0.0, "lambda must be positive");
    Ok(sigma.inverse()?.scale(lambda / 2.0))
}

/// Canonical isotropic solution u = λn/(2 Tr Σ), defining U = u·I_n.
pub fn isotropic_reward(sigma: &SpdMatrix, lambda: f64) -> f64 {
    assert!(lambda > 0.0, "lambda must be positive");
    let n = sigma.dim() as f64;
    let tr = sigma.reconstruct().trace().expect("square");
    lambda * n / (2.0 * tr)
}

/// θ*(U) = (Λ, λU⁻¹/2).
pub fn inner_solution(
    u: &SpdMatrix,
    truth: &LinearGaussianTruth,
    lambda: f64,
) -> Result<InnerSolution, LinalgError> {
    assert!(lambda > 0.0, "lambda must be positive");
    if u.dim() != truth.output_dim() {
        return Err(LinalgError::DimensionMismatch { expected: truth.output_dim(), got: u.dim() });
    }
    Ok(InnerSolution { a_star: truth.lambda.clone(), b_star: u.inverse()?.scale(lambda / 2.0) })
}

/// Membership in the isotropic solution family: SPD with
/// Tr(U) = λn²/(2 Tr Σ) up to a relative tolerance.
pub fn verify_family(u: &SpdMatrix, sigma: &SpdMatrix, lambda: f64, tol: f64) -> bool {
    if u.dim() != sigma.dim() {
        return false;
    }
    let n = sigma.dim() as f64;
    let target = lambda * n * n / (2.0 * sigma.reconstruct().trace().expect("square"));
    let tr = u.reconstruct().trace().expect("square");
    (tr - target).abs() <= tol * target
}

/// Parameter layout for the theory-side objectives: A free, B through its
/// Cholesky factor with log-diagonal so gradient steps stay inside the cone.
#[derive(Debug, Clone)]
pub struct LinearGaussianParams {
    pub pv: ParamVector,
    a: SegmentId,
    chol_strict: SegmentId,
    chol_logdiag: SegmentId,
    n: usize,
    m: usize,
}

impl LinearGaussianParams {
    pub fn new(a: &Matrix, b: &SpdMatrix) -> Self {
        let (n, m) = (a.rows(), a.cols());
        assert_eq!(b.dim(), n);
        let l = b.factor();
        let mut strict = vec![0.0; n * n];
        let mut logdiag = vec![0.0; n];
        for i in 0..n {
            logdiag[i] = l.get(i, i).ln();
            for j in 0..i {
                strict[i * n + j] = l.get(i, j);
            }
        }
        let mut pv = ParamVector::new();
        let a_id = pv.push_segment("a", n, m, a.data().to_vec());
        let s_id = pv.push_segment("b_chol_strict", n, n, strict);
        let d_id = pv.push_segment("b_chol_logdiag", 1, n, logdiag);
        Self { pv, a: a_id, chol_strict: s_id, chol_logdiag: d_id, n, m }
    }

    /// The same layout at a different point.
    pub fn with_values(&self, point: &ParamVector) -> Self {
        assert_eq!(point.len(), self.pv.len(), "layout mismatch");
        let mut out = self.clone();
        out.pv = point.clone();
        out
    }

    pub fn a_matrix(&self) -> Matrix {
        Matrix::new(self.n, self.m, self.pv.slice(self.a).to_vec())
    }

    pub fn b_spd(&self) -> SpdMatrix {
        let n = self.n;
        let strict = self.pv.slice(self.chol_strict);
        let logdiag = self.pv.slice(self.chol_logdiag);
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            l.set(i, i, logdiag[i].exp());
            for j in 0..i {
                l.set(i, j, strict[i * n + j]);
            }
        }
        l.matmul(&l.transpose()).unwrap().cholesky().expect("L·Lᵀ is SPD")
    }

    /// (A node (n×m), B node (n×n), log det B node (1×1)) on the tape.
    pub fn build<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
    ) -> Result<(NodeId, NodeId, NodeId), AutodiffError> {
        let n = self.n;
        let a = bound.node(self.a);
        let strict = bound.node(self.chol_strict);
        let logdiag = bound.node(self.chol_logdiag);
        let mut mask = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                mask[i * n + j] = 1.0;
            }
        }
        let mask = tape.constant(n, n, &mask);
        let strict_l = tape.mul(strict, mask)?;
        let pos_diag = tape.exp(logdiag);
        let diag = tape.diag_embed(pos_diag)?;
        let l = tape.add(strict_l, diag)?;
        let lt = tape.transpose(l);
        let b = tape.matmul(l, lt)?;
        // log det(LLᵀ) = 2 Σ log L_ii = 2 Σ logdiag
        let ld_sum = tape.sum_all(logdiag);
        let logdet = tape.scale(ld_sum, 2.0);
        Ok((a, b, logdet))
    }
}

/// Negated closed-form inner objective −J(A,B), as a minimizable loss over a
/// [`LinearGaussianParams`] point. Maximizing J by gradient ascent on this
/// loss must recover θ*(U).
pub struct NegClosedFormJ {
    pub layout: LinearGaussianParams,
    pub truth: LinearGaussianTruth,
    pub u: SpdMatrix,
    pub lambda: f64,
    pub sigma_x: SpdMatrix,
}

fn trace_product<S: Scalar>(
    tape: &mut Tape<S>,
    sym_const: NodeId,
    other: NodeId,
) -> Result<NodeId, AutodiffError> {
    // Tr(M·N) for symmetric M = Σ_ij M_ij N_ij when N is symmetric too;
    // computed as sum(M ⊙ Nᵀ) to stay valid for any N.
    let nt = tape.transpose(other);
    let prod = tape.mul(sym_const, nt)?;
    Ok(tape.sum_all(prod))
}

impl NegClosedFormJ {
    fn build_j<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
    ) -> Result<NodeId, AutodiffError> {
        let n = self.truth.output_dim();
        let (a, b, logdet) = self.layout.build(tape, bound)?;
        let lambda_mat = tape.constant(n, self.truth.input_dim(), self.truth.lambda.data());
        let u = {
            let dense = self.u.reconstruct();
            tape.constant(n, n, dense.data())
        };
        let sigma_x = {
            let dense = self.sigma_x.reconstruct();
            tape.constant(dense.rows(), dense.cols(), dense.data())
        };

        // Tr((A−Λ)ᵀ U (A−Λ) Σ_X) = Σ_ij D_ij (U D Σ_X)_ij with D = A − Λ
        let d = tape.sub(a, lambda_mat)?;
        let ud = tape.matmul(u, d)?;
        let udsx = tape.matmul(ud, sigma_x)?;
        let t1_prod = tape.mul(d, udsx)?;
        let t1 = tape.sum_all(t1_prod);

        // Tr(U(B+Σ))
        let sigma = {
            let dense = self.truth.sigma.reconstruct();
            tape.constant(n, n, dense.data())
        };
        let b_plus = tape.add(b, sigma)?;
        let t2 = trace_product(tape, u, b_plus)?;

        // λ·entropy of N(·,B)
        let half_logdet = tape.scale(logdet, 0.5);
        let ent = tape.add_const(half_logdet, 0.5 * n as f64 * (1.0 + LOG_TAU));
        let ent_l = tape.scale(ent, self.lambda);

        let sum12 = tape.add(t1, t2)?;
        tape.sub(ent_l, sum12) // J = −t1 − t2 + λ·H
    }
}

impl DiffFn for NegClosedFormJ {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError> {
        let j = self.build_j(tape, params)?;
        Ok(tape.neg(j))
    }
}

/// E_X KL(N(Ax, B) ‖ N(Λx, Σ)) as a differentiable loss:
/// ½[Tr(Σ⁻¹B) + Tr((A−Λ)ᵀΣ⁻¹(A−Λ)Σ_X) − n + ln detΣ − ln detB].
pub struct ExpectedReverseKl {
    pub layout: LinearGaussianParams,
    pub truth: LinearGaussianTruth,
    pub sigma_x: SpdMatrix,
}

impl DiffFn for ExpectedReverseKl {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError> {
        let n = self.truth.output_dim();
        let (a, b, logdet) = self.layout.build(tape, params)?;
        let sigma_inv = self.truth.sigma.inverse().expect("Σ invertible").reconstruct();
        let si = tape.constant(n, n, sigma_inv.data());
        let lambda_mat = tape.constant(n, self.truth.input_dim(), self.truth.lambda.data());
        let sigma_x = {
            let dense = self.sigma_x.reconstruct();
            tape.constant(dense.rows(), dense.cols(), dense.data())
        };

        let tr_sib = trace_product(tape, si, b)?;
        let d = tape.sub(a, lambda_mat)?;
        let sid = tape.matmul(si, d)?;
        let sidsx = tape.matmul(sid, sigma_x)?;
        let mean_prod = tape.mul(d, sidsx)?;
        let mean_term = tape.sum_all(mean_prod);

        let neg_logdet = tape.neg(logdet);
        let t = tape.add(tr_sib, mean_term)?;
        let t = tape.add(t, neg_logdet)?;
        let shifted = tape.add_const(t, self.truth.sigma.log_det() - n as f64);
        Ok(tape.scale(shifted, 0.5))
    }
}

/// The closed-form inner objective as a bilevel function of
/// (φ = log u, θ = linear policy parameters), for an isotropic reward
/// U = u·I and diagonal model covariance B = diag(exp logvar).
///
/// This is the infinite-sample limit of the Gaussian PG loss on the linear
/// policy, which makes finite-difference-through-retraining checks exact.
pub struct IsotropicJInner {
    pub truth: LinearGaussianTruth,
    pub sigma_x: SpdMatrix,
    pub lambda: f64,
    /// Segment ids inside the policy parameter vector.
    pub mean_w: SegmentId,
    pub logvar: SegmentId,
    /// Segment id of log u inside the reward parameter vector.
    pub logu: SegmentId,
}

impl BilevelFn for IsotropicJInner {
    fn build<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        phi: &Bound,
        theta: &Bound,
    ) -> Result<NodeId, AutodiffError> {
        let n = self.truth.output_dim();
        let logu = phi.node(self.logu);
        let u = tape.exp(logu); // 1×1

        // W is input-major (m×n); D = W − Λᵀ so Tr((A−Λ)ᵀU(A−Λ)Σx) = u·Tr(DᵀΣx D)
        let w = theta.node(self.mean_w);
        let lambda_t = self.truth.lambda.transpose();
        let lt = tape.constant(lambda_t.rows(), lambda_t.cols(), lambda_t.data());
        let d = tape.sub(w, lt)?;
        let sigma_x = {
            let dense = self.sigma_x.reconstruct();
            tape.constant(dense.rows(), dense.cols(), dense.data())
        };
        let sxd = tape.matmul(sigma_x, d)?;
        let prod = tape.mul(d, sxd)?;
        let tr_mean = tape.sum_all(prod);
        let t1 = tape.mul_scalar(u, tr_mean)?;

        // u·(Σ_j exp(lv_j) + Tr Σ)
        let lv = theta.node(self.logvar);
        let lv = tape.clamp(lv, crate::models::LOGVAR_MIN, crate::models::LOGVAR_MAX);
        let ev = tape.exp(lv);
        let ev_sum = tape.sum_all(ev);
        let tr_b_sigma = tape.add_const(ev_sum, self.truth.sigma.reconstruct().trace().unwrap());
        let t2 = tape.mul_scalar(u, tr_b_sigma)?;

        // λ·H with log det B = Σ_j lv_j
        let lv_sum = tape.sum_all(lv);
        let half = tape.scale(lv_sum, 0.5);
        let ent = tape.add_const(half, 0.5 * n as f64 * (1.0 + LOG_TAU));
        let ent_l = tape.scale(ent, self.lambda);

        // inner loss = −J = t1 + t2 − λH
        let t12 = tape.add(t1, t2)?;
        tape.sub(t12, ent_l)
    }
}
