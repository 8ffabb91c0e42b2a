//! Training losses: negative log-likelihood, mean squared error, the
//! entropy-regularized policy-gradient loss for Gaussian and categorical
//! policies, the closed-form inner objective, and reverse-KL diagnostics.
//!
//! Losses are minimized everywhere, so the policy-gradient objective
//! E\[r\] + λH enters negated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    AutodiffError, BilevelFn, Bound, DiffFn, NodeId, ParamVector, Scalar, SegmentId, Tape,
};
use crate::linalg::{Matrix, SpdMatrix, Vector};
use crate::models::{CategoricalPolicy, GaussianPolicy, LinearGaussianTruth, LOG_TAU};
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Which gradient estimator a policy-gradient loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Reparameterized,
    ScoreFunction,
}

/// Policy-gradient loss configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PgConfig {
    /// Entropy-regularization weight λ > 0.
    pub lambda: f64,
    /// Monte-Carlo draws per data point.
    pub mc_samples: usize,
    pub estimator: Estimator,
}

impl PgConfig {
    pub fn new(lambda: f64, mc_samples: usize, estimator: Estimator) -> Result<Self, ObjectiveError> {
        let cfg = Self { lambda, mc_samples, estimator };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.lambda > 0.0) {
            return Err(ObjectiveError::InvalidConfig(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.mc_samples == 0 {
            return Err(ObjectiveError::InvalidConfig("mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parametrization of the reward matrix U in r_U(ŷ, y) = −(ŷ−y)ᵀU(ŷ−y).
///
/// Scalar and diagonal kinds are optimized in log space so positivity is
/// structural; the full kind lives in Cholesky-factor space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    ScalarIsotropic,
    Diagonal,
    Full,
}

#[derive(Debug, Clone)]
pub struct RewardParams {
    dim: usize,
    kind: RewardKind,
    params: ParamVector,
    seg_logu: Option<SegmentId>,
    seg_strict: Option<SegmentId>,
    seg_logdiag: Option<SegmentId>,
}

pub enum RewardNodes {
    Scalar(NodeId),
    Diag(NodeId),
    Full(NodeId),
}

impl RewardParams {
    /// U = I_n, the squared-Euclidean baseline reward.
    pub fn identity(dim: usize) -> Self {
        Self::scalar_isotropic(dim, 1.0)
    }

    /// U = u·I_n with u > 0.
    pub fn scalar_isotropic(dim: usize, u: f64) -> Self {
        assert!(u > 0.0, "u must be positive");
        let mut params = ParamVector::new();
        let seg = params.push_segment("reward_logu", 1, 1, vec![u.ln()]);
        Self {
            dim,
            kind: RewardKind::ScalarIsotropic,
            params,
            seg_logu: Some(seg),
            seg_strict: None,
            seg_logdiag: None,
        }
    }

    /// U = diag(u) with every u_j > 0.
    pub fn diagonal(diag: &[f64]) -> Self {
        assert!(diag.iter().all(|v| *v > 0.0), "diagonal must be positive");
        let mut params = ParamVector::new();
        let seg = params.push_segment(
            "reward_logu",
            1,
            diag.len(),
            diag.iter().map(|v| v.ln()).collect(),
        );
        Self {
            dim: diag.len(),
            kind: RewardKind::Diagonal,
            params,
            seg_logu: Some(seg),
            seg_strict: None,
            seg_logdiag: None,
        }
    }

    /// Full SPD reward, stored as its Cholesky factor.
    pub fn from_spd(u: &SpdMatrix) -> Self {
        let n = u.dim();
        let l = u.factor();
        let mut strict = vec![0.0; n * n];
        let mut logdiag = vec![0.0; n];
        for i in 0..n {
            logdiag[i] = l.get(i, i).ln();
            for j in 0..i {
                strict[i * n + j] = l.get(i, j);
            }
        }
        let mut params = ParamVector::new();
        let seg_strict = params.push_segment("reward_chol_strict", n, n, strict);
        let seg_logdiag = params.push_segment("reward_chol_logdiag", 1, n, logdiag);
        Self {
            dim: n,
            kind: RewardKind::Full,
            params,
            seg_logu: None,
            seg_strict: Some(seg_strict),
            seg_logdiag: Some(seg_logdiag),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// The realized U as an SPD matrix.
    pub fn realize(&self) -> SpdMatrix {
        match self.kind {
            RewardKind::ScalarIsotropic => {
                let u = self.params.slice(self.seg_logu.unwrap())[0].exp();
                SpdMatrix::from_diag(&vec![u; self.dim])
            }
            RewardKind::Diagonal => {
                let diag: Vec<f64> =
                    self.params.slice(self.seg_logu.unwrap()).iter().map(|v| v.exp()).collect();
                SpdMatrix::from_diag(&diag)
            }
            RewardKind::Full => {
                let n = self.dim;
                let strict = self.params.slice(self.seg_strict.unwrap());
                let logdiag = self.params.slice(self.seg_logdiag.unwrap());
                let mut l = Matrix::zeros(n, n);
                for i in 0..n {
                    l.set(i, i, logdiag[i].exp());
                    for j in 0..i {
                        l.set(i, j, strict[i * n + j]);
                    }
                }
                let dense = l.matmul(&l.transpose()).unwrap();
                dense.cholesky().expect("L·Lᵀ is SPD by construction")
            }
        }
    }

    /// Realized positive parameters for traces: \[u\] or the diagonal.
    pub fn u_summary(&self) -> Vec<f64> {
        match self.kind {
            RewardKind::ScalarIsotropic | RewardKind::Diagonal => {
                self.params.slice(self.seg_logu.unwrap()).iter().map(|v| v.exp()).collect()
            }
            RewardKind::Full => {
                let u = self.realize().reconstruct();
                u.data().to_vec()
            }
        }
    }

    /// For the scalar-isotropic kind, the realized u.
    pub fn scalar_u(&self) -> Option<f64> {
        match self.kind {
            RewardKind::ScalarIsotropic => {
                Some(self.params.slice(self.seg_logu.unwrap())[0].exp())
            }
            _ => None,
        }
    }

    /// Builds the realized U on the tape from reward parameters bound at
    /// `bound` (gradients flow into the reward), or as constants if `None`.
    pub fn build_nodes<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: Option<&Bound>,
    ) -> Result<RewardNodes, AutodiffError> {
        let seg_node = |tape: &mut Tape<S>, id: SegmentId| -> NodeId {
            let info = self.params.segment(id);
            tape.constant(info.rows, info.cols, self.params.slice(id))
        };
        match self.kind {
            RewardKind::ScalarIsotropic => {
                let raw = match bound {
                    Some(b) => b.node(self.seg_logu.unwrap()),
                    None => seg_node(tape, self.seg_logu.unwrap()),
                };
                Ok(RewardNodes::Scalar(tape.exp(raw)))
            }
            RewardKind::Diagonal => {
                let raw = match bound {
                    Some(b) => b.node(self.seg_logu.unwrap()),
                    None => seg_node(tape, self.seg_logu.unwrap()),
                };
                Ok(RewardNodes::Diag(tape.exp(raw)))
            }
            RewardKind::Full => {
                let n = self.dim;
                let (strict, logdiag) = match bound {
                    Some(b) => {
                        (b.node(self.seg_strict.unwrap()), b.node(self.seg_logdiag.unwrap()))
                    }
                    None => (
                        seg_node(tape, self.seg_strict.unwrap()),
                        seg_node(tape, self.seg_logdiag.unwrap()),
                    ),
                };
                // strictly-lower mask zeroes everything else in the raw block
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
                Ok(RewardNodes::Full(tape.matmul(l, lt)?))
            }
        }
    }
}

/// Per-row Mahalanobis penalty dᵀUd for a batch of residual rows (b×n).
pub fn build_penalty<S: Scalar>(
    tape: &mut Tape<S>,
    u: &RewardNodes,
    diff: NodeId,
    rows: usize,
) -> Result<NodeId, AutodiffError> {
    match u {
        RewardNodes::Scalar(s) => {
            let sq = tape.mul(diff, diff)?;
            let per_row = tape.sum_rows(sq);
            tape.mul_scalar(*s, per_row)
        }
        RewardNodes::Diag(d) => {
            let sq = tape.mul(diff, diff)?;
            let w = tape.broadcast_row(*d, rows)?;
            let weighted = tape.mul(sq, w)?;
            Ok(tape.sum_rows(weighted))
        }
        RewardNodes::Full(m) => {
            let du = tape.matmul(diff, *m)?; // U symmetric, so diff·U = (U·diffᵀ)ᵀ
            let q = tape.mul(du, diff)?;
            Ok(tape.sum_rows(q))
        }
    }
}

fn check_batch(
    rows: usize,
    x_cols: usize,
    want_x: usize,
    y_cols: usize,
    want_y: usize,
) -> Result<(), ObjectiveError> {
    if rows == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    if x_cols != want_x {
        return Err(ObjectiveError::DimensionMismatch { expected: want_x, got: x_cols });
    }
    if y_cols != want_y {
        return Err(ObjectiveError::DimensionMismatch { expected: want_y, got: y_cols });
    }
    Ok(())
}

/// Mean Gaussian NLL over a batch: mean_i −log p̂_θ(y_i | x_i).
pub struct GaussianNll<'a> {
    policy: &'a GaussianPolicy,
    xs: &'a Matrix,
    ys: &'a Matrix,
}

impl<'a> GaussianNll<'a> {
    pub fn new(policy: &'a GaussianPolicy, xs: &'a Matrix, ys: &'a Matrix) -> Result<Self, ObjectiveError> {
        check_batch(xs.rows(), xs.cols(), policy.input_dim(), ys.cols(), policy.output_dim())?;
        if ys.rows() != xs.rows() {
            return Err(ObjectiveError::DimensionMismatch { expected: xs.rows(), got: ys.rows() });
        }
        Ok(Self { policy, xs, ys })
    }
}

impl DiffFn for GaussianNll<'_> {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError> {
        let b = self.xs.rows();
        let n = self.policy.output_dim();
        let x = tape.constant(b, self.xs.cols(), self.xs.data());
        let y = tape.constant(b, n, self.ys.data());
        let (mu, lv) = self.policy.build_forward(tape, params, x, b)?;
        let diff = tape.sub(y, mu)?;
        let sq = tape.mul(diff, diff)?;
        let neg_lv = tape.neg(lv);
        let inv_var = tape.exp(neg_lv);
        let mahal = tape.mul(sq, inv_var)?;
        let inner = tape.add(mahal, lv)?;
        let total = tape.sum_all(inner);
        let scaled = tape.scale(total, 0.5 / b as f64);
        Ok(tape.add_const(scaled, 0.5 * n as f64 * LOG_TAU))
    }
}

/// Mean squared error of the mean head: mean_i ‖μ_θ(x_i) − y_i‖².
pub struct MseLoss<'a> {
    policy: &'a GaussianPolicy,
    xs: &'a Matrix,
    ys: &'a Matrix,
}

impl<'a> MseLoss<'a> {
    pub fn new(policy: &'a GaussianPolicy, xs: &'a Matrix, ys: &'a Matrix) -> Result<Self, ObjectiveError> {
        check_batch(xs.rows(), xs.cols(), policy.input_dim(), ys.cols(), policy.output_dim())?;
        Ok(Self { policy, xs, ys })
    }
}

impl DiffFn for MseLoss<'_> {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError> {
        let b = self.xs.rows();
        let x = tape.constant(b, self.xs.cols(), self.xs.data());
        let y = tape.constant(b, self.ys.cols(), self.ys.data());
        let (mu, _) = self.policy.build_forward(tape, params, x, b)?;
        let diff = tape.sub(mu, y)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum_all(sq);
        Ok(tape.scale(total, 1.0 / b as f64))
    }
}

/// Mean categorical cross-entropy −log softmax(logits)\[y\].
pub struct CategoricalNll<'a> {
    policy: &'a CategoricalPolicy,
    xs: &'a Matrix,
    classes: &'a [usize],
}

impl<'a> CategoricalNll<'a> {
    pub fn new(
        policy: &'a CategoricalPolicy,
        xs: &'a Matrix,
        classes: &'a [usize],
    ) -> Result<Self, ObjectiveError> {
        check_batch(xs.rows(), xs.cols(), policy.feature_dim(), 0, 0)?;
        if classes.len() != xs.rows() {
            return Err(ObjectiveError::DimensionMismatch { expected: xs.rows(), got: classes.len() });
        }
        if classes.iter().any(|c| *c >= policy.classes()) {
            return Err(ObjectiveError::DimensionMismatch {
                expected: policy.classes(),
                got: *classes.iter().max().unwrap() + 1,
            });
        }
        Ok(Self { policy, xs, classes })
    }
}

impl DiffFn for CategoricalNll<'_> {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError> {
        let b = self.xs.rows();
        let x = tape.constant(b, self.xs.cols(), self.xs.data());
        let logits = self.policy.build_logits(tape, params, x, b)?;
        let lse = tape.log_sum_exp_rows(logits);
        let picked = tape.gather_cols(logits, self.classes.to_vec())?;
        let per_row = tape.sub(lse, picked)?;
        let total = tape.sum_all(per_row);
        Ok(tape.scale(total, 1.0 / b as f64))
    }
}

/// Entropy-regularized Gaussian policy-gradient loss
/// −(mean reward + λ·mean entropy), with frozen Monte-Carlo noise so a
/// constructed loss is a deterministic, differentiable function of θ.
pub struct GaussianPg<'a> {
    policy: &'a GaussianPolicy,
    xs: &'a Matrix,
    ys: &'a Matrix,
    reward: &'a RewardParams,
    cfg: PgConfig,
    noise: Vec<Matrix>,
}

impl<'a> GaussianPg<'a> {
    pub fn new(
        policy: &'a GaussianPolicy,
        xs: &'a Matrix,
        ys: &'a Matrix,
        reward: &'a RewardParams,
        cfg: PgConfig,
        rng: &mut RngStream,
    ) -> Result<Self, ObjectiveError> {
        let b = xs.rows();
        let n = policy.output_dim();
        let noise = (0..cfg.mc_samples)
            .map(|_| Matrix::from_fn(b, n, |_, _| rng.normal()))
            .collect();
        Self::with_noise(policy, xs, ys, reward, cfg, noise)
    }

    /// Injected noise, one (batch×n) matrix per Monte-Carlo sample.
    pub fn with_noise(
        policy: &'a GaussianPolicy,
        xs: &'a Matrix,
        ys: &'a Matrix,
        reward: &'a RewardParams,
        cfg: PgConfig,
        noise: Vec<Matrix>,
    ) -> Result<Self, ObjectiveError> {
        cfg.validate()?;
        check_batch(xs.rows(), xs.cols(), policy.input_dim(), ys.cols(), policy.output_dim())?;
        if reward.dim() != policy.output_dim() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: policy.output_dim(),
                got: reward.dim(),
            });
        }
        if noise.len() != cfg.mc_samples {
            return Err(ObjectiveError::DimensionMismatch {
                expected: cfg.mc_samples,
                got: noise.len(),
            });
        }
        Ok(Self { policy, xs, ys, reward, cfg, noise })
    }

    /// Core graph shared by the θ-only loss and the bilevel inner loss:
    /// the reward nodes decide whether gradients reach the reward parameters.
    fn build_with_reward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &Bound,
        u: &RewardNodes,
    ) -> Result<NodeId, AutodiffError> {
        let b = self.xs.rows();
        let n = self.policy.output_dim();
        let x = tape.constant(b, self.xs.cols(), self.xs.data());
        let y = tape.constant(b, n, self.ys.data());
        let (mu, lv) = self.policy.build_forward(tape, params, x, b)?;

        let penalty_mean = match self.cfg.estimator {
            Estimator::Reparameterized => {
                let half_lv = tape.scale(lv, 0.5);
                let sigma = tape.exp(half_lv);
                let mut pen_total: Option<NodeId> = None;
                for z in &self.noise {
                    let zn = tape.constant(b, n, z.data());
                    let sz = tape.mul(sigma, zn)?;
                    let yhat = tape.add(mu, sz)?;
                    let diff = tape.sub(yhat, y)?;
                    let pen = build_penalty(tape, u, diff, b)?;
                    pen_total = Some(match pen_total {
                        Some(acc) => tape.add(acc, pen)?,
                        None => pen,
                    });
                }
                let total = tape.sum_all(pen_total.expect("mc_samples >= 1"));
                tape.scale(total, 1.0 / (b * self.cfg.mc_samples) as f64)
            }
            Estimator::ScoreFunction => {
                // REINFORCE surrogate: samples and rewards are constants,
                // gradients flow only through the log-density.
                let samples = self.score_samples();
                let weights = score_weights(&samples.penalties);
                let mut term: Option<NodeId> = None;
                for (s, z) in samples.values.iter().enumerate() {
                    let yhat = tape.constant(b, n, z.data());
                    let d = tape.sub(yhat, mu)?;
                    let sq = tape.mul(d, d)?;
                    let neg_lv = tape.neg(lv);
                    let inv_var = tape.exp(neg_lv);
                    let mahal = tape.mul(sq, inv_var)?;
                    let inner = tape.add(mahal, lv)?;
                    let row = tape.sum_rows(inner);
                    let logp = tape.scale(row, -0.5); // + const, irrelevant to ∇
                    let w = tape.constant(b, 1, &weights[s]);
                    let weighted = tape.mul(w, logp)?;
                    term = Some(match term {
                        Some(acc) => tape.add(acc, weighted)?,
                        None => weighted,
                    });
                }
                let total = tape.sum_all(term.expect("mc_samples >= 1"));
                // the surrogate's gradient estimates ∇E[penalty]
                tape.scale(total, 1.0 / b as f64)
            }
        };

        // analytic entropy, averaged over the batch
        let lv_sum = tape.sum_all(lv);
        let ent = tape.scale(lv_sum, 0.5 / b as f64);
        let ent_mean = tape.add_const(ent, 0.5 * n as f64 * (1.0 + LOG_TAU));
        let weighted_ent = tape.scale(ent_mean, self.cfg.lambda);
        tape.sub(penalty_mean, weighted_ent)
    }

    /// Realized sample values and penalties for the score-function estimator.
    fn score_samples(&self) -> ScoreSamples {
        let b = self.xs.rows();
        let n = self.policy.output_dim();
        let u = self.reward.realize();
        let mut values = Vec::with_capacity(self.noise.len());
        let mut penalties = Vec::with_capacity(self.noise.len());
        for z in &self.noise {
            let mut yhat = Matrix::zeros(b, n);
            let mut pen = vec![0.0; b];
            for i in 0..b {
                let xi = Vector::new(self.xs.row(i).to_vec());
                let zi = Vector::new(z.row(i).to_vec());
                let s = self.policy.sample_with_noise(&xi, &zi);
                let v = s.value.as_vector();
                let d = v.sub(&Vector::new(self.ys.row(i).to_vec()));
                pen[i] = u.quadratic_form(&d).unwrap();
                for j in 0..n {
                    yhat.set(i, j, v[j]);
                }
            }
            values.push(yhat);
            penalties.push(pen);
        }
        ScoreSamples { values, penalties }
    }
}

struct ScoreSamples {
    values: Vec<Matrix>,
    penalties: Vec<Vec<f64>>,
}

/// Leave-one-out baseline weights (penalty − baseline)/S per sample; the
/// including-own-sample mean would shrink the estimator by (1 − 1/S).
fn score_weights(penalties: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s_count = penalties.len();
    let b = penalties[0].len();
    let mut weights = vec![vec![0.0; b]; s_count];
    for i in 0..b {
        let total: f64 = penalties.iter().map(|p| p[i]).sum();
        for (s, pen) in penalties.iter().enumerate() {
            let baseline = if s_count > 1 { (total - pen[i]) / (s_count - 1) as f64 } else { 0.0 };
            weights[s][i] = (pen[i] - baseline) / s_count as f64;
        }
    }
    weights
}

impl DiffFn for GaussianPg<'_> {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError> {
        let u = self.reward.build_nodes(tape, None)?;
        self.build_with_reward(tape, params, &u)
    }
}

/// The same Gaussian PG loss viewed as a bilevel inner objective: φ is the
/// reward parametrization, θ the policy.
pub struct GaussianPgInner<'a>(pub GaussianPg<'a>);

impl BilevelFn for GaussianPgInner<'_> {
    fn build<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        phi: &Bound,
        theta: &Bound,
    ) -> Result<NodeId, AutodiffError> {
        let u = self.0.reward.build_nodes(tape, Some(phi))?;
        self.0.build_with_reward(tape, theta, &u)
    }
}

/// REINFORCE loss for the softmax policy with a leave-one-out mean baseline
/// and analytic entropy. Sampled classes and their rewards are frozen at
/// construction.
pub struct CategoricalPg<'a> {
    policy: &'a CategoricalPolicy,
    xs: &'a Matrix,
    cfg: PgConfig,
    sampled: Vec<Vec<usize>>,
    /// Penalties (−reward): 0 for a correct class, 2·u-weighted otherwise.
    penalties: Vec<Vec<f64>>,
}

impl<'a> CategoricalPg<'a> {
    pub fn new(
        policy: &'a CategoricalPolicy,
        xs: &'a Matrix,
        labels: &'a [usize],
        reward: &'a RewardParams,
        cfg: PgConfig,
        rng: &mut RngStream,
    ) -> Result<Self, ObjectiveError> {
        cfg.validate()?;
        if cfg.estimator == Estimator::Reparameterized {
            return Err(ObjectiveError::InvalidConfig(
                "categorical sampling cannot be reparameterized; use score-function".into(),
            ));
        }
        check_batch(xs.rows(), xs.cols(), policy.feature_dim(), 0, 0)?;
        if labels.len() != xs.rows() {
            return Err(ObjectiveError::DimensionMismatch { expected: xs.rows(), got: labels.len() });
        }
        if reward.dim() != policy.classes() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: policy.classes(),
                got: reward.dim(),
            });
        }
        let b = xs.rows();
        let k = policy.classes();
        let u = reward.realize();
        let mut sampled = vec![vec![0usize; b]; cfg.mc_samples];
        let mut penalties = vec![vec![0.0; b]; cfg.mc_samples];
        for i in 0..b {
            let xi = Vector::new(xs.row(i).to_vec());
            for s in 0..cfg.mc_samples {
                let draw = policy.sample(&xi, rng).value.as_class();
                sampled[s][i] = draw;
                if draw != labels[i] {
                    let mut d = Vector::zeros(k);
                    d[draw] = 1.0;
                    d[labels[i]] = -1.0;
                    penalties[s][i] = u.quadratic_form(&d).unwrap();
                }
            }
        }
        Ok(Self { policy, xs, cfg, sampled, penalties })
    }

    /// Sampled classes per (mc sample, batch row); exposed for estimator tests.
    pub fn sampled(&self) -> &[Vec<usize>] {
        &self.sampled
    }
}

impl DiffFn for CategoricalPg<'_> {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError> {
        let b = self.xs.rows();
        let k = self.policy.classes();
        let x = tape.constant(b, self.xs.cols(), self.xs.data());
        let logits = self.policy.build_logits(tape, params, x, b)?;
        let lse = tape.log_sum_exp_rows(logits);
        let lse_b = tape.broadcast_col(lse, k)?;
        let log_softmax = tape.sub(logits, lse_b)?;

        let weights = score_weights(&self.penalties);
        let mut term: Option<NodeId> = None;
        for (s, classes) in self.sampled.iter().enumerate() {
            let logp = tape.gather_cols(log_softmax, classes.clone())?;
            let w = tape.constant(b, 1, &weights[s]);
            let weighted = tape.mul(w, logp)?;
            term = Some(match term {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        let penalty_term = tape.sum_all(term.expect("mc_samples >= 1"));
        let penalty_mean = tape.scale(penalty_term, 1.0 / b as f64);

        // analytic entropy −Σ π log π, averaged over the batch
        let probs = tape.exp(log_softmax);
        let plogp = tape.mul(probs, log_softmax)?;
        let ent_total = tape.sum_all(plogp);
        let ent_mean = tape.scale(ent_total, -1.0 / b as f64);
        let weighted_ent = tape.scale(ent_mean, self.cfg.lambda);
        tape.sub(penalty_mean, weighted_ent)
    }
}

/// The closed-form inner objective
/// J(A,B) = −Tr((A−Λ)ᵀU(A−Λ)Σ_X) − Tr(U(B+Σ)) + λ·H(N(·,B)),
/// with the entropy written out as ½log((2πe)^n det B).
pub fn closed_form_j(
    a: &Matrix,
    b: &SpdMatrix,
    truth: &LinearGaussianTruth,
    u: &SpdMatrix,
    lambda: f64,
    sigma_x: &SpdMatrix,
) -> Result<f64, ObjectiveError> {
    let n = truth.output_dim();
    let m = truth.input_dim();
    if a.rows() != n || a.cols() != m {
        return Err(ObjectiveError::DimensionMismatch { expected: n * m, got: a.rows() * a.cols() });
    }
    if b.dim() != n || u.dim() != n || sigma_x.dim() != m {
        return Err(ObjectiveError::DimensionMismatch { expected: n, got: b.dim().max(u.dim()) });
    }
    let d = a.sub(&truth.lambda).map_err(|_| ObjectiveError::DimensionMismatch {
        expected: n * m,
        got: a.rows() * a.cols(),
    })?;
    let u_dense = u.reconstruct();
    // Tr(Dᵀ U D Σx) over D = A − Λ
    let udsx = u_dense.matmul(&d).unwrap().matmul(&sigma_x.reconstruct()).unwrap();
    let t1: f64 = d.data().iter().zip(udsx.data()).map(|(x, y)| x * y).sum();
    let b_plus_sigma = b.reconstruct().add(&truth.sigma.reconstruct()).unwrap();
    let t2 = u_dense.matmul(&b_plus_sigma).unwrap().trace().unwrap();
    let entropy = 0.5 * (n as f64 * (1.0 + LOG_TAU) + b.log_det());
    Ok(-t1 - t2 + lambda * entropy)
}

/// Reverse KL between same-mean Gaussians: KL(N(μ,B) ‖ N(μ,Σ)) =
/// ½[Tr(Σ⁻¹B) − n + ln(detΣ/detB)].
pub fn reverse_kl_gaussian(b: &SpdMatrix, sigma: &SpdMatrix) -> Result<f64, ObjectiveError> {
    if b.dim() != sigma.dim() {
        return Err(ObjectiveError::DimensionMismatch { expected: sigma.dim(), got: b.dim() });
    }
    let n = b.dim() as f64;
    let sigma_inv = sigma.inverse().map_err(|_| {
        ObjectiveError::InvalidConfig("sigma is not invertible".into())
    })?;
    let tr = sigma_inv.reconstruct().matmul(&b.reconstruct()).unwrap().trace().unwrap();
    Ok(0.5 * (tr - n + sigma.log_det() - b.log_det()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_gradient, gradient, loss_value, max_rel_err};

    fn batch_from(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> (Matrix, Matrix) {
        (Matrix::from_rows(xs), Matrix::from_rows(ys))
    }

    fn pg_cfg(lambda: f64, s: usize) -> PgConfig {
        PgConfig::new(lambda, s, Estimator::Reparameterized).unwrap()
    }

    #[test]
    fn nll_reference_values() {
        let mut rng = RngStream::seed(1);
        let mut policy = GaussianPolicy::linear(1, 1, &mut rng);
        policy.set_mean_matrix(&Matrix::zeros(1, 1));
        policy.set_logvar(&[0.0]);
        let (xs, ys) = batch_from(&[vec![0.0]], &[vec![0.0]]);
        let f = GaussianNll::new(&policy, &xs, &ys).unwrap();
        let v = loss_value(&f, policy.params()).unwrap();
        assert!((v - 0.5 * LOG_TAU).abs() < 1e-12, "std normal nll {v}");

        // at the clamp floor with a perfect mean fit the per-dim value is
        // ½(log σ² + log 2π) = ½(−10 + log 2π)
        policy.set_logvar(&[-10.0]);
        let f = GaussianNll::new(&policy, &xs, &ys).unwrap();
        let v = loss_value(&f, policy.params()).unwrap();
        assert!((v - 0.5 * (-10.0 + LOG_TAU)).abs() < 1e-12, "clamped nll {v}");
    }

    #[test]
    fn nll_invariant_to_duplicating_rows() {
        let mut rng = RngStream::seed(2);
        let policy = GaussianPolicy::mlp(2, 2, &[8], &mut rng);
        let (xs, ys) = batch_from(
            &[vec![0.5, -1.0], vec![1.5, 0.3]],
            &[vec![0.2, 0.1], vec![-0.4, 1.0]],
        );
        let once = loss_value(&GaussianNll::new(&policy, &xs, &ys).unwrap(), policy.params()).unwrap();
        let (xs2, ys2) = batch_from(
            &[vec![0.5, -1.0], vec![1.5, 0.3], vec![0.5, -1.0], vec![1.5, 0.3]],
            &[vec![0.2, 0.1], vec![-0.4, 1.0], vec![0.2, 0.1], vec![-0.4, 1.0]],
        );
        let twice = loss_value(&GaussianNll::new(&policy, &xs2, &ys2).unwrap(), policy.params()).unwrap();
        assert!((once - twice).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut rng = RngStream::seed(3);
        let policy = GaussianPolicy::linear(2, 2, &mut rng);
        let xs = Matrix::zeros(0, 2);
        let ys = Matrix::zeros(0, 2);
        assert!(matches!(
            GaussianNll::new(&policy, &xs, &ys),
            Err(ObjectiveError::EmptyBatch)
        ));
        assert!(matches!(MseLoss::new(&policy, &xs, &ys), Err(ObjectiveError::EmptyBatch)));
    }

    #[test]
    fn mse_reference_values() {
        let mut rng = RngStream::seed(4);
        let mut policy = GaussianPolicy::linear(1, 2, &mut rng);
        policy.set_mean_matrix(&Matrix::zeros(2, 1));
        let (xs, ys) = batch_from(&[vec![1.0]], &[vec![3.0, 4.0]]);
        let f = MseLoss::new(&policy, &xs, &ys).unwrap();
        assert!((loss_value(&f, policy.params()).unwrap() - 25.0).abs() < 1e-12);

        // μ = y everywhere → 0
        let ys0 = Matrix::zeros(1, 2);
        let f0 = MseLoss::new(&policy, &xs, &ys0).unwrap();
        assert!(loss_value(&f0, policy.params()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mse_gradient_is_twice_nll_mean_gradient_at_unit_variance() {
        let mut rng = RngStream::seed(5);
        let mut policy = GaussianPolicy::linear(2, 2, &mut rng);
        policy.set_logvar(&[0.0, 0.0]);
        let (xs, ys) = batch_from(
            &[vec![0.5, -1.0], vec![1.5, 0.3], vec![-0.7, 0.9]],
            &[vec![0.2, 0.1], vec![-0.4, 1.0], vec![0.8, -0.6]],
        );
        let g_nll = gradient(&GaussianNll::new(&policy, &xs, &ys).unwrap(), policy.params()).unwrap();
        let g_mse = gradient(&MseLoss::new(&policy, &xs, &ys).unwrap(), policy.params()).unwrap();
        // mean-weight block: ∇mse = 2·∇nll when σ² = 1
        let w_len = 4;
        for i in 0..w_len {
            assert!((g_mse[i] - 2.0 * g_nll[i]).abs() < 1e-10, "index {i}");
        }
    }

    #[test]
    fn pg_zero_residual_loss_is_negative_entropy() {
        // exact-match samples: μ = y, injected zero noise → reward term 0
        let mut rng = RngStream::seed(6);
        let mut policy = GaussianPolicy::linear(1, 2, &mut rng);
        policy.set_mean_matrix(&Matrix::zeros(2, 1));
        policy.set_logvar(&[0.3, -0.2]);
        let (xs, ys) = batch_from(&[vec![0.0]], &[vec![0.0, 0.0]]);
        let reward = RewardParams::scalar_isotropic(2, 1e-8);
        let cfg = pg_cfg(1.0, 2);
        let noise = vec![Matrix::zeros(1, 2), Matrix::zeros(1, 2)];
        let f = GaussianPg::with_noise(&policy, &xs, &ys, &reward, cfg, noise).unwrap();
        let v = loss_value(&f, policy.params()).unwrap();
        let x = Vector::new(vec![0.0]);
        assert!((v + policy.entropy(&x)).abs() < 1e-10, "loss {v}");
    }

    #[test]
    fn pg_chi_square_mean_matches_monte_carlo() {
        // λ→0, U = I, μ = y: E[penalty] = n·σ²  (‖σz‖² is σ²·χ²_n)
        let mut rng = RngStream::seed(7);
        let mut policy = GaussianPolicy::linear(1, 2, &mut rng);
        policy.set_mean_matrix(&Matrix::zeros(2, 1));
        let sigma_sq: f64 = 0.49;
        policy.set_logvar(&[sigma_sq.ln(), sigma_sq.ln()]);
        let (xs, ys) = batch_from(&[vec![0.0]], &[vec![0.0, 0.0]]);
        let reward = RewardParams::identity(2);
        let lambda_small = 1e-12;
        let cfg = PgConfig::new(lambda_small, 1, Estimator::Reparameterized).unwrap();

        let trials = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..trials {
            let f = GaussianPg::new(&policy, &xs, &ys, &reward, cfg, &mut rng).unwrap();
            let v = loss_value(&f, policy.params()).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / trials as f64;
        let var = (sumsq / trials as f64 - mean * mean).max(0.0);
        let se = (var / trials as f64).sqrt();
        let expect = 2.0 * sigma_sq; // n·σ², entropy term negligible at λ≈0
        assert!((mean - expect).abs() < 3.0 * se + 1e-9, "mean {mean} expect {expect} se {se}");
    }

    #[test]
    fn pg_gradient_matches_finite_differences_galore() {
        let mut rng = RngStream::seed(8);
        for policy in [
            GaussianPolicy::linear(2, 2, &mut rng),
            GaussianPolicy::mlp(2, 2, &[6], &mut rng),
        ] {
            let (xs, ys) = batch_from(
                &[vec![0.5, -1.0], vec![1.5, 0.3]],
                &[vec![0.2, 0.1], vec![-0.4, 1.0]],
            );
            for reward in [
                RewardParams::scalar_isotropic(2, 0.7),
                RewardParams::diagonal(&[0.5, 2.0]),
                RewardParams::from_spd(
                    &Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).cholesky().unwrap(),
                ),
            ] {
                let cfg = pg_cfg(0.8, 3);
                let f = GaussianPg::new(&policy, &xs, &ys, &reward, cfg, &mut rng).unwrap();
                let g = gradient(&f, policy.params()).unwrap();
                let fd = finite_diff_gradient(&f, policy.params(), 1e-5).unwrap();
                let err = max_rel_err(&g, &fd, 1e-6);
                assert!(err < 1e-4, "rel err {err} for {:?}", reward.kind());
            }
        }
    }

    #[test]
    fn pg_rejects_reward_dimension_mismatch() {
        let mut rng = RngStream::seed(90);
        let policy = GaussianPolicy::linear(2, 2, &mut rng);
        let (xs, ys) = batch_from(&[vec![0.5, -1.0]], &[vec![0.2, 0.1]]);
        let reward = RewardParams::identity(3);
        let cfg = pg_cfg(1.0, 2);
        assert!(matches!(
            GaussianPg::new(&policy, &xs, &ys, &reward, cfg, &mut rng),
            Err(ObjectiveError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn categorical_pg_rejects_reparameterized() {
        let mut rng = RngStream::seed(9);
        let policy = CategoricalPolicy::new(2, 3, &mut rng);
        let xs = Matrix::from_rows(&[vec![0.1, 0.2]]);
        let reward = RewardParams::identity(3);
        let cfg = PgConfig::new(1.0, 2, Estimator::Reparameterized).unwrap();
        assert!(matches!(
            CategoricalPg::new(&policy, &xs, &[0], &reward, cfg, &mut rng),
            Err(ObjectiveError::InvalidConfig(_))
        ));
    }

    #[test]
    fn categorical_penalty_is_zero_or_2u() {
        let mut rng = RngStream::seed(10);
        let policy = CategoricalPolicy::new(2, 3, &mut rng);
        let xs = Matrix::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.6]]);
        let labels = [0usize, 2];
        let u_val = 1.7;
        let reward = RewardParams::scalar_isotropic(3, u_val);
        let cfg = PgConfig::new(1.0, 4, Estimator::ScoreFunction).unwrap();
        let f = CategoricalPg::new(&policy, &xs, &labels, &reward, cfg, &mut rng).unwrap();
        for (s, classes) in f.sampled.iter().enumerate() {
            for (i, c) in classes.iter().enumerate() {
                let expect = if *c == labels[i] { 0.0 } else { 2.0 * u_val };
                assert!((f.penalties[s][i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn categorical_deterministic_correct_policy_loss_is_negative_entropy() {
        let mut rng = RngStream::seed(11);
        let mut policy = CategoricalPolicy::new(1, 2, &mut rng);
        // logits strongly favor class 0 for every input
        policy.params_mut().set_values(&[0.0, 0.0, 30.0, -30.0]).unwrap();
        let xs = Matrix::from_rows(&[vec![1.0]]);
        let labels = [0usize];
        let reward = RewardParams::identity(2);
        let cfg = PgConfig::new(1.0, 4, Estimator::ScoreFunction).unwrap();
        let f = CategoricalPg::new(&policy, &xs, &labels, &reward, cfg, &mut rng).unwrap();
        let v = loss_value(&f, policy.params()).unwrap();
        // reward term 0 and entropy ≈ 0
        assert!(v.abs() < 1e-6, "loss {v}");
    }

    #[test]
    fn categorical_pg_gradient_matches_finite_differences() {
        // with samples and weights frozen, the surrogate is deterministic
        let mut rng = RngStream::seed(12);
        let policy = CategoricalPolicy::new(2, 3, &mut rng);
        let xs = Matrix::from_rows(&[vec![0.4, -0.2], vec![0.9, 0.5], vec![-1.2, 0.0]]);
        let labels = [0usize, 1, 2];
        let reward = RewardParams::scalar_isotropic(3, 0.9);
        let cfg = PgConfig::new(0.5, 3, Estimator::ScoreFunction).unwrap();
        let f = CategoricalPg::new(&policy, &xs, &labels, &reward, cfg, &mut rng).unwrap();
        let g = gradient(&f, policy.params()).unwrap();
        let fd = finite_diff_gradient(&f, policy.params(), 1e-6).unwrap();
        assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn gaussian_score_function_gradient_matches_finite_differences() {
        let mut rng = RngStream::seed(13);
        let policy = GaussianPolicy::linear(2, 2, &mut rng);
        let (xs, ys) = batch_from(
            &[vec![0.5, -1.0], vec![1.5, 0.3]],
            &[vec![0.2, 0.1], vec![-0.4, 1.0]],
        );
        let reward = RewardParams::identity(2);
        let cfg = PgConfig::new(0.7, 4, Estimator::ScoreFunction).unwrap();
        let f = GaussianPg::new(&policy, &xs, &ys, &reward, cfg, &mut rng).unwrap();
        let g = gradient(&f, policy.params()).unwrap();
        let fd = finite_diff_gradient(&f, policy.params(), 1e-5).unwrap();
        // the surrogate includes log p of frozen samples; finite differences
        // of the same frozen surrogate must agree
        assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn closed_form_j_reference_value() {
        // A=Λ, U=I, B=I, Σ=I, λ=2, n=1 → J = −2 + log(2πe)
        let truth = LinearGaussianTruth::new(Matrix::identity(1), SpdMatrix::identity(1));
        let j = closed_form_j(
            &Matrix::identity(1),
            &SpdMatrix::identity(1),
            &truth,
            &SpdMatrix::identity(1),
            2.0,
            &SpdMatrix::identity(1),
        )
        .unwrap();
        assert!((j - (-2.0 + (1.0 + LOG_TAU))).abs() < 1e-12, "J {j}");
    }

    #[test]
    fn closed_form_j_decreases_away_from_lambda() {
        let mut rng = RngStream::seed(14);
        let truth = LinearGaussianTruth::new(
            Matrix::from_rows(&[vec![0.7, -0.3], vec![0.4, 1.1]]),
            SpdMatrix::from_diag(&[0.5, 0.8]),
        );
        let u = SpdMatrix::from_diag(&[1.0, 2.0]);
        let sigma_x = SpdMatrix::from_diag(&[2.0, 3.0]);
        let b = SpdMatrix::identity(2);
        let at_opt =
            closed_form_j(&truth.lambda, &b, &truth, &u, 1.0, &sigma_x).unwrap();
        for _ in 0..20 {
            let perturbed = Matrix::from_fn(2, 2, |i, j| truth.lambda.get(i, j) + 0.3 * rng.normal());
            let j = closed_form_j(&perturbed, &b, &truth, &u, 1.0, &sigma_x).unwrap();
            assert!(j <= at_opt + 1e-12, "J should not exceed the A=Λ value");
        }
    }

    #[test]
    fn reverse_kl_reference_values() {
        let b = SpdMatrix::identity(2);
        assert!(reverse_kl_gaussian(&b, &b).unwrap().abs() < 1e-12);

        // n=1, B=1, Σ=2: ½[0.5 − 1 + ln 2]
        let kl = reverse_kl_gaussian(
            &SpdMatrix::from_diag(&[1.0]),
            &SpdMatrix::from_diag(&[2.0]),
        )
        .unwrap();
        assert!((kl - 0.5 * (0.5 - 1.0 + 2.0_f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn reverse_kl_nonnegative_and_zero_iff_equal() {
        let mut rng = RngStream::seed(15);
        for _ in 0..30 {
            let b = crate::linalg::test_util::random_spd(3, &mut rng, 0.2);
            let s = crate::linalg::test_util::random_spd(3, &mut rng, 0.2);
            let kl = reverse_kl_gaussian(&b, &s).unwrap();
            assert!(kl >= -1e-12, "reverse KL must be nonnegative, got {kl}");
        }
        let s = crate::linalg::test_util::random_spd(3, &mut rng, 0.2);
        assert!(reverse_kl_gaussian(&s, &s).unwrap().abs() < 1e-9);

        // inputs equal within 1e-12 give KL below 1e-9; a visible gap gives
        // a strictly positive value
        let nearly = {
            let mut dense = s.reconstruct();
            dense.set(0, 0, dense.get(0, 0) + 1e-13);
            dense.cholesky().unwrap()
        };
        assert!(reverse_kl_gaussian(&nearly, &s).unwrap().abs() < 1e-9);
        let apart = {
            let mut dense = s.reconstruct();
            for i in 0..3 {
                dense.set(i, i, dense.get(i, i) * 1.05);
            }
            dense.cholesky().unwrap()
        };
        assert!(reverse_kl_gaussian(&apart, &s).unwrap() > 1e-8);
    }

    #[test]
    fn reward_params_realize_roundtrip() {
        let mut rng = RngStream::seed(16);
        let spd = crate::linalg::test_util::random_spd(3, &mut rng, 0.3);
        let reward = RewardParams::from_spd(&spd);
        let back = reward.realize().reconstruct();
        let orig = spd.reconstruct();
        assert!(back.sub(&orig).unwrap().max_abs() < 1e-10);

        let iso = RewardParams::scalar_isotropic(2, 0.25);
        assert!((iso.scalar_u().unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(iso.u_summary(), vec![0.25]);
    }
}
