//! End-to-end acceptance suite. Each test prints one PASS/FAIL line; run
//! with `cargo test --test acceptance -- --nocapture` to see all of them.

use nllpo::autodiff::{
    finite_diff_gradient, grad_theta, gradient, hvp, loss_value, max_rel_err, value_and_gradient,
    AutodiffError, BilevelFn, Bound, DiffFn, NodeId, ParamVector, Scalar, SegmentId, Tape,
};
use nllpo::bilevel::{cg_solve, hypergradient, solve_bilevel, BilevelConfig, CgConfig};
use nllpo::closed_form::{
    inner_solution, isotropic_reward, optimal_reward, IsotropicJInner, LinearGaussianParams,
    NegClosedFormJ,
};
use nllpo::data::generate_synthetic;
use nllpo::harness::{
    build_dataset, epochs_to_within, run_training_experiment, train, write_metrics_jsonl,
    ExperimentKind, LossKind, ModelKind, RunConfig,
};
use nllpo::linalg::{Matrix, SpdMatrix, Vector};
use nllpo::models::{CategoricalPolicy, GaussianPolicy, LinearGaussianTruth};
use nllpo::objectives::{
    closed_form_j, reverse_kl_gaussian, CategoricalPg, Estimator, GaussianNll, GaussianPg,
    MseLoss, PgConfig, RewardParams,
};
use nllpo::optim::{Adam, Optimizer};
use nllpo::rng::RngStream;

const LOG_TAU: f64 = 1.8378770664093453;

fn random_spd(n: usize, rng: &mut RngStream, eps: f64) -> SpdMatrix {
    let g = Matrix::from_fn(n, n, |_, _| rng.normal());
    let mut m = g.transpose().matmul(&g).unwrap();
    for i in 0..n {
        m.set(i, i, m.get(i, i) + eps);
    }
    m.cholesky().unwrap()
}

struct Instance {
    n: usize,
    lambda: f64,
    sigma: SpdMatrix,
    sigma_x: SpdMatrix,
    u: SpdMatrix,
    truth: LinearGaussianTruth,
}

fn instances(count: usize, seed: u64) -> Vec<Instance> {
    let mut rng = RngStream::seed(seed);
    let dims = [1usize, 2, 4];
    let lambdas = [0.5, 1.0, 2.0];
    (0..count)
        .map(|i| {
            let n = dims[i % 3];
            let lambda = lambdas[(i / 3) % 3];
            let sigma = random_spd(n, &mut rng, 0.3);
            let sigma_x = random_spd(n, &mut rng, 0.3);
            let u = random_spd(n, &mut rng, 0.3);
            let truth = LinearGaussianTruth::new(
                Matrix::from_fn(n, n, |_, _| rng.uniform_range(-1.0, 1.0)),
                sigma.clone(),
            );
            Instance { n, lambda, sigma, sigma_x, u, truth }
        })
        .collect()
}

/// Adam descent with staged learning-rate decay to a tight gradient norm;
/// panics if it never gets there.
fn minimize(
    f: &impl DiffFn,
    start: &ParamVector,
    lr: f64,
    iters_per_stage: usize,
    grad_tol: f64,
) -> ParamVector {
    let mut point = start.clone();
    let mut last_norm = f64::INFINITY;
    for stage in 0..7 {
        let stage_lr = lr / 5.0_f64.powi(stage);
        let mut opt = Optimizer::Adam(Adam::new(stage_lr, point.len()));
        for _ in 0..iters_per_stage {
            let (_, g) = value_and_gradient(f, &point).expect("finite loss");
            last_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if last_norm < grad_tol {
                return point;
            }
            opt.step(point.values_mut(), &g).expect("finite step");
        }
    }
    panic!("minimize did not converge: final gradient norm {last_norm}");
}

// ---------------------------------------------------------------------------
// 1. Closed-form recovery
// ---------------------------------------------------------------------------

#[test]
fn acceptance_1_closed_form_recovery() {
    let t0 = std::time::Instant::now();
    let mut worst_a = 0.0_f64;
    let mut worst_b = 0.0_f64;
    for inst in instances(20, 101) {
        let sol = inner_solution(&inst.u, &inst.truth, inst.lambda).unwrap();
        let start = LinearGaussianParams::new(
            &Matrix::zeros(inst.n, inst.n),
            &SpdMatrix::identity(inst.n),
        );
        let loss = NegClosedFormJ {
            layout: start.clone(),
            truth: inst.truth.clone(),
            u: inst.u.clone(),
            lambda: inst.lambda,
            sigma_x: inst.sigma_x.clone(),
        };
        let point = minimize(&loss, &start.pv, 0.05, 5_000, 1e-7);
        let recovered = start.with_values(&point);
        let a_err = frob(&recovered.a_matrix().sub(&sol.a_star).unwrap());
        let b_err =
            frob(&recovered.b_spd().reconstruct().sub(&sol.b_star.reconstruct()).unwrap());
        worst_a = worst_a.max(a_err);
        worst_b = worst_b.max(b_err);
        assert!(a_err < 1e-4, "A recovery error {a_err} (n={}, λ={})", inst.n, inst.lambda);
        assert!(b_err < 1e-3, "B recovery error {b_err} (n={}, λ={})", inst.n, inst.lambda);
    }
    println!(
        "ACCEPTANCE 1 (closed-form recovery): PASS — 20 instances, worst ‖A−Λ‖={worst_a:.2e}, worst ‖B−λU⁻¹/2‖={worst_b:.2e} [{:.1?}]", t0.elapsed()
    );
}

fn frob(m: &Matrix) -> f64 {
    m.frob_norm()
}

// ---------------------------------------------------------------------------
// 2. Outer optimum
// ---------------------------------------------------------------------------

/// Population outer NLL at θ*(U), as a function of U in Cholesky space:
/// (1/λ)Tr(UΣ) − ½ ln det U + const.
struct OuterNllInU {
    reward: RewardParams,
    sigma: Matrix,
    lambda: f64,
    logdiag_seg: SegmentId,
}

impl DiffFn for OuterNllInU {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError> {
        let u = match self.reward.build_nodes(tape, Some(params))? {
            nllpo::objectives::RewardNodes::Full(node) => node,
            _ => unreachable!("outer optimum check uses the full reward kind"),
        };
        let sigma = tape.constant(self.sigma.rows(), self.sigma.cols(), self.sigma.data());
        // Tr(UΣ) = Σ_ij U_ij Σ_ij for symmetric factors
        let prod = tape.mul(u, sigma)?;
        let tr = tape.sum_all(prod);
        let tr_term = tape.scale(tr, 1.0 / self.lambda);
        let ld_sum = tape.sum_all(params.node(self.logdiag_seg));
        let logdet = tape.scale(ld_sum, 2.0);
        let half_ld = tape.scale(logdet, 0.5);
        tape.sub(tr_term, half_ld)
    }
}

#[test]
fn acceptance_2_outer_optimum() {
    let t0 = std::time::Instant::now();
    let mut worst = 0.0_f64;
    for inst in instances(20, 101) {
        let u_star = optimal_reward(&inst.sigma, inst.lambda).unwrap();
        let reward = RewardParams::from_spd(&SpdMatrix::identity(inst.n));
        let logdiag_seg = reward.params().find("reward_chol_logdiag").unwrap();
        let loss = OuterNllInU {
            sigma: inst.sigma.reconstruct(),
            lambda: inst.lambda,
            logdiag_seg,
            reward: reward.clone(),
        };
        let point = minimize(&loss, reward.params(), 0.05, 5_000, 1e-7);
        let mut recovered = reward.clone();
        recovered.params_mut().set_values(point.values()).unwrap();
        let u_final = recovered.realize().reconstruct();
        let rel = frob(&u_final.sub(&u_star.reconstruct()).unwrap())
            / frob(&u_star.reconstruct());
        worst = worst.max(rel);
        assert!(
            rel < 0.02,
            "outer optimum off by {rel} (n={}, λ={})",
            inst.n,
            inst.lambda
        );
    }
    println!(
        "ACCEPTANCE 2 (outer optimum U* = (λ/2)Σ⁻¹): PASS — 20 instances, worst relative Frobenius error {worst:.2e} [{:.1?}]", t0.elapsed()
    );
}

// ---------------------------------------------------------------------------
// 3. Hypergradient correctness
// ---------------------------------------------------------------------------

struct ScalarInner {
    phi_seg: SegmentId,
    theta_seg: SegmentId,
}
impl BilevelFn for ScalarInner {
    fn build<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        phi: &Bound,
        theta: &Bound,
    ) -> Result<NodeId, AutodiffError> {
        let p = phi.node(self.phi_seg);
        let t = theta.node(self.theta_seg);
        let d = tape.sub(t, p)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.scale(sq, 0.5))
    }
}

struct ScalarOuter {
    theta_seg: SegmentId,
}
impl DiffFn for ScalarOuter {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError> {
        let t = params.node(self.theta_seg);
        let sq = tape.mul(t, t)?;
        Ok(tape.scale(sq, 0.5))
    }
}

#[test]
fn acceptance_3_hypergradient_correctness() {
    let t0 = std::time::Instant::now();
    // (a) the hand-derived scalar instance: hypergradient equals φ
    let mut rng = RngStream::seed(303);
    let mut worst_scalar = 0.0_f64;
    for _ in 0..50 {
        let phi_val = rng.uniform_range(-3.0, 3.0);
        let mut phi = ParamVector::new();
        let phi_seg = phi.push_segment("phi", 1, 1, vec![phi_val]);
        let mut theta = ParamVector::new();
        let theta_seg = theta.push_segment("theta", 1, 1, vec![phi_val]);
        let h = hypergradient(
            &ScalarInner { phi_seg, theta_seg },
            &ScalarOuter { theta_seg },
            &phi,
            &theta,
            CgConfig { max_iters: 10, tol: 1e-14 },
        )
        .unwrap();
        worst_scalar = worst_scalar.max((h.grad_phi[0] - phi_val).abs());
    }
    assert!(worst_scalar < 1e-8, "scalar-instance error {worst_scalar}");

    // (b) linear-Gaussian scalar-u: implicit vs finite differences through
    // full inner re-optimization of the closed-form inner objective
    let n = 2;
    let beta = 0.5;
    let lambda = 1.0;
    let (data, truth) = generate_synthetic(n, n, 512, beta, 77);
    let sigma_x = SpdMatrix::from_diag(&vec![25.0 / 3.0; n]);
    let xs = data.inputs_rows(&data.split.train);
    let ys = data.targets_rows(&data.split.train);

    let mut pol_rng = RngStream::seed(7);
    let mut policy = GaussianPolicy::linear(n, n, &mut pol_rng);
    let inner = IsotropicJInner {
        truth: truth.clone(),
        sigma_x,
        lambda,
        mean_w: policy.params().find("mean_w").unwrap(),
        logvar: policy.params().find("logvar").unwrap(),
        logu: RewardParams::scalar_isotropic(n, 1.0).params().find("reward_logu").unwrap(),
    };

    let retrain = |policy: &mut GaussianPolicy, reward: &RewardParams| {
        let mut opt = Optimizer::Adam(Adam::new(0.05, policy.params().len()));
        for _ in 0..20_000 {
            let g = grad_theta(&inner, reward.params(), policy.params()).unwrap();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-11 {
                return;
            }
            opt.step(policy.params_mut().values_mut(), &g).unwrap();
        }
        panic!("inner retraining did not converge");
    };

    let mut worst_rel = 0.0_f64;
    for k in 0..20 {
        let u_val = rng.uniform_range(0.3, 5.0);
        let reward = RewardParams::scalar_isotropic(n, u_val);
        retrain(&mut policy, &reward);

        let outer = GaussianNll::new(&policy, &xs, &ys).unwrap();
        let h = hypergradient(
            &inner,
            &outer,
            reward.params(),
            policy.params(),
            CgConfig { max_iters: 100, tol: 1e-12 },
        )
        .unwrap();

        // central finite differences in ρ = ln u through re-optimization
        let dh = 1e-3;
        let mut fd = [0.0; 2];
        for (side, mult) in [(0usize, 1.0), (1, -1.0)] {
            let reward_side = RewardParams::scalar_isotropic(n, (u_val.ln() + mult * dh).exp());
            let mut policy_side = policy.clone();
            retrain(&mut policy_side, &reward_side);
            let outer_side = GaussianNll::new(&policy_side, &xs, &ys).unwrap();
            fd[side] = loss_value(&outer_side, policy_side.params()).unwrap();
        }
        let fd_grad = (fd[0] - fd[1]) / (2.0 * dh);
        let rel = (h.grad_phi[0] - fd_grad).abs() / fd_grad.abs().max(1e-12);
        worst_rel = worst_rel.max(rel);
        assert!(
            rel < 0.05,
            "trial {k}: implicit {} vs finite-difference {} (rel {rel})",
            h.grad_phi[0],
            fd_grad
        );
    }
    println!(
        "ACCEPTANCE 3 (hypergradient correctness): PASS — scalar instance ≤ {worst_scalar:.1e}, retraining check worst rel err {worst_rel:.3} [{:.1?}]", t0.elapsed()
    );
}

// ---------------------------------------------------------------------------
// 4. Implicit solver convergence at its reference configuration
// ---------------------------------------------------------------------------

#[test]
fn acceptance_4_implicit_solver_convergence() {
    let t0 = std::time::Instant::now();
    let (data, truth) = generate_synthetic(2, 2, 2000, 0.5, 42);
    let lambda = 1.0;
    let u_star = isotropic_reward(&truth.sigma, lambda);

    // 100 outer iterations × 50 inner, learning rate 1e-2 for both loops,
    // outer variable initialized at u = 1
    let cfg = BilevelConfig::default();
    assert_eq!((cfg.outer_iters, cfg.inner_iters), (100, 50));
    assert_eq!((cfg.outer_lr, cfg.inner_lr), (1e-2, 1e-2));

    let mut pol_rng = RngStream::seed(7);
    let policy = GaussianPolicy::linear(2, 2, &mut pol_rng);
    let mut rng = RngStream::seed(42);
    let (reward, _, trace) = solve_bilevel(
        &data,
        policy,
        RewardParams::scalar_isotropic(2, 1.0),
        &cfg,
        &mut rng,
    )
    .unwrap();

    let u_final = reward.scalar_u().unwrap();
    let rel = (u_final - u_star).abs() / u_star;
    assert!(rel < 0.2, "final u {u_final} vs u* {u_star} (rel {rel})");

    let first_nll = trace.records.first().unwrap().outer_nll;
    let last_nll = trace.records.last().unwrap().outer_nll;
    assert!(
        last_nll < first_nll,
        "outer NLL must strictly improve: {first_nll} -> {last_nll}"
    );
    assert!(trace.records.iter().all(|r| r.outer_nll.is_finite()));
    println!(
        "ACCEPTANCE 4 (implicit solver, 100×50 @ 1e-2): PASS — u 1.0→{u_final:.4} (u*={u_star}, rel {rel:.3}), outer NLL {first_nll:.4}→{last_nll:.4} [{:.1?}]", t0.elapsed()
    );
}

// ---------------------------------------------------------------------------
// 5. PG with the optimal-scale reward tracks the NLL baseline
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_pg_matches_nll_baseline_and_identity_is_unstable() {
    let t0 = std::time::Instant::now();
    // default synthetic configuration: MLP 2×64, Adam 1e-3, 400 epochs
    let nll_cfg = RunConfig::default();
    let (data, truth) = build_dataset(&nll_cfg, 1).unwrap();
    let truth = truth.unwrap();
    let n = truth.output_dim() as f64;

    let mut rng = RngStream::seed(1);
    let nll_out = train(&nll_cfg, &data, Some(&truth), &mut rng).unwrap();

    let pg_cfg = RunConfig {
        loss: LossKind::PgHeuristic,
        // estimate the conditional covariance the theory scales by
        heuristic_residual: true,
        ..RunConfig::default()
    };
    let mut rng = RngStream::seed(1);
    let pg_out = train(&pg_cfg, &data, Some(&truth), &mut rng).unwrap();

    let nll_final = nll_out.records.last().unwrap().val_nll.unwrap();
    let pg_final = pg_out.records.last().unwrap().val_nll.unwrap();
    let gap = (pg_final - nll_final).abs() / n;
    assert!(gap < 0.1, "PG(U_he) {pg_final} vs NLL {nll_final}: {gap} nats/dim");

    // tracked (non-fatal): moment-matching convergence speed
    let speed = |records: &[nllpo::harness::MetricsRecord]| {
        let vals: Vec<(usize, f64)> = records
            .iter()
            .filter_map(|r| r.mean_err.map(|v| (r.epoch, v)))
            .collect();
        epochs_to_within(&vals, 0.10)
    };
    println!(
        "  tracked: epochs to within 10% of final mean_err — pg-heuristic {:?} vs nll {:?} (soft check, not asserted)",
        speed(&pg_out.records),
        speed(&nll_out.records)
    );

    // identity reward with small λ on low-noise data: the documented failure
    let unstable_cfg = RunConfig {
        loss: LossKind::PgIdentity,
        model: ModelKind::Linear,
        lambda: 1e-5,
        beta: 0.05,
        lr: 0.1,
        epochs: 600,
        batch_size: 256,
        data_rows: 600,
        ..RunConfig::default()
    };
    let (data_u, truth_u) = build_dataset(&unstable_cfg, 5).unwrap();
    let mut rng = RngStream::seed(5);
    let unstable_out = train(&unstable_cfg, &data_u, truth_u.as_ref(), &mut rng).unwrap();
    assert!(
        unstable_out.instability.flagged(),
        "PG(I_n) with λ=1e-5, β=0.05 must trip the instability flag"
    );
    println!(
        "ACCEPTANCE 5 (PG(U_he) tracks NLL, PG(I) unstable): PASS — gap {gap:.4} nats/dim; instability clamp_engaged={} nll_diverged={} [{:.1?}]",
        unstable_out.instability.clamp_engaged, unstable_out.instability.nll_diverged, t0.elapsed()
    );
}

// ---------------------------------------------------------------------------
// 6. Classification ordering
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_classification_ordering() {
    let t0 = std::time::Instant::now();
    let run_for = |loss: LossKind, classes: usize| {
        let cfg = RunConfig {
            experiment: ExperimentKind::Classify,
            loss,
            classes,
            epochs: 100,
            seeds: 5,
            seed: 100,
            lambda: 0.1,
            ..RunConfig::default()
        };
        run_training_experiment(&cfg).unwrap()
    };

    // binary task: accuracy and AUC orderings
    let he = run_for(LossKind::PgHeuristic, 2);
    let id = run_for(LossKind::PgIdentity, 2);
    let acc_he = he.test_accuracy.unwrap().mean;
    let acc_id = id.test_accuracy.unwrap().mean;
    let auc_he = he.test_auc.unwrap().mean;
    let auc_id = id.test_auc.unwrap().mean;
    assert!(acc_he >= acc_id, "accuracy ordering violated: {acc_he} < {acc_id}");
    assert!(auc_he >= auc_id, "AUC ordering violated: {auc_he} < {auc_id}");

    // multiclass task: accuracy ordering
    let he3 = run_for(LossKind::PgHeuristic, 3);
    let id3 = run_for(LossKind::PgIdentity, 3);
    let acc_he3 = he3.test_accuracy.unwrap().mean;
    let acc_id3 = id3.test_accuracy.unwrap().mean;
    assert!(acc_he3 >= acc_id3, "multiclass accuracy ordering violated: {acc_he3} < {acc_id3}");

    println!(
        "ACCEPTANCE 6 (classification ordering over 5 seeds): PASS — binary acc {acc_he:.4}≥{acc_id:.4}, AUC {auc_he:.4}≥{auc_id:.4}; K=3 acc {acc_he3:.4}≥{acc_id3:.4} [{:.1?}]", t0.elapsed()
    );
}

// ---------------------------------------------------------------------------
// 7. Estimator unbiasedness
// ---------------------------------------------------------------------------

/// Exact expected categorical PG loss by enumerating the K classes; shares
/// nothing with the score-function path except the forward logits.
struct ExactCategoricalLoss<'a> {
    policy: &'a CategoricalPolicy,
    x: Vec<f64>,
    penalties: Vec<f64>,
    lambda: f64,
}

impl DiffFn for ExactCategoricalLoss<'_> {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound) -> Result<NodeId, AutodiffError> {
        let k = self.policy.classes();
        let x = tape.constant(1, self.x.len(), &self.x);
        let logits = self.policy.build_logits(tape, params, x, 1)?;
        let lse = tape.log_sum_exp_rows(logits);
        let lse_b = tape.broadcast_col(lse, k)?;
        let log_softmax = tape.sub(logits, lse_b)?;
        let probs = tape.exp(log_softmax);
        let pen = tape.constant(1, k, &self.penalties);
        let weighted = tape.mul(probs, pen)?;
        let expected_pen = tape.sum_all(weighted);
        let plogp = tape.mul(probs, log_softmax)?;
        let ent_sum = tape.sum_all(plogp);
        let ent = tape.scale(ent_sum, -1.0);
        let ent_l = tape.scale(ent, self.lambda);
        tape.sub(expected_pen, ent_l)
    }
}

#[test]
fn acceptance_7_estimator_unbiasedness() {
    let t0 = std::time::Instant::now();
    // categorical score-function estimator vs exact enumeration, K = 4
    let k = 4;
    let u_val = 0.8;
    let lambda = 0.5;
    let mut rng = RngStream::seed(707);
    let mut policy = CategoricalPolicy::new(1, k, &mut rng);
    // moderately uneven logits so every class keeps sampling mass
    let mut vals = vec![0.3, -0.2, 0.5, -0.4]; // weights (1×K at feature_dim 1)
    vals.extend(vec![0.2, 0.1, -0.3, 0.0]); // bias
    policy.params_mut().set_values(&vals).unwrap();

    let label = 2usize;
    let mut penalties = vec![2.0 * u_val; k];
    penalties[label] = 0.0;
    let x = vec![1.0];
    let exact_loss =
        ExactCategoricalLoss { policy: &policy, x: x.clone(), penalties, lambda };
    let exact_grad = gradient(&exact_loss, policy.params()).unwrap();

    let reward = RewardParams::scalar_isotropic(k, u_val);
    let pg_cfg = PgConfig::new(lambda, 4, Estimator::ScoreFunction).unwrap();
    let rows = 2500; // identical rows per eval; 4 samples each
    let xs = Matrix::from_fn(rows, 1, |_, _| 1.0);
    let labels = vec![label; rows];

    let evals = 100; // total draws: 100 × 2500 × 4 = 10⁶
    let dim = policy.params().len();
    let mut sums = vec![0.0; dim];
    let mut sums_sq = vec![0.0; dim];
    for _ in 0..evals {
        let f = CategoricalPg::new(&policy, &xs, &labels, &reward, pg_cfg, &mut rng).unwrap();
        let g = gradient(&f, policy.params()).unwrap();
        for i in 0..dim {
            sums[i] += g[i];
            sums_sq[i] += g[i] * g[i];
        }
    }
    let mut worst_sigmas = 0.0_f64;
    for i in 0..dim {
        let mean = sums[i] / evals as f64;
        let var = (sums_sq[i] / evals as f64 - mean * mean).max(0.0);
        let se = (var / evals as f64).sqrt();
        let dev = (mean - exact_grad[i]).abs();
        let sigmas = dev / se.max(1e-12);
        worst_sigmas = worst_sigmas.max(sigmas);
        assert!(
            dev <= 3.0 * se + 1e-9,
            "coordinate {i}: estimator mean {mean} vs exact {} ({sigmas:.2}σ)",
            exact_grad[i]
        );
    }

    // Gaussian reparameterized PG loss vs the closed-form objective
    let n = 2;
    let lambda_g = 1.0;
    let beta = 0.6;
    let truth = LinearGaussianTruth::new(
        Matrix::from_rows(&[vec![0.7, -0.4], vec![0.2, 1.1]]),
        SpdMatrix::from_diag(&[beta * beta, beta * beta]),
    );
    let mut pol_rng = RngStream::seed(708);
    let mut gp = GaussianPolicy::linear(n, n, &mut pol_rng);
    let a = Matrix::from_rows(&[vec![0.5, -0.1], vec![0.4, 0.9]]);
    gp.set_mean_matrix(&a);
    gp.set_logvar(&[0.3_f64.ln(), 0.8_f64.ln()]);
    let b = SpdMatrix::from_diag(&[0.3, 0.8]);
    let sigma_x = SpdMatrix::from_diag(&vec![25.0 / 3.0; n]);
    let u = SpdMatrix::from_diag(&[0.9, 0.9]);
    let j = closed_form_j(&a, &b, &truth, &u, lambda_g, &sigma_x).unwrap();

    let reward_g = RewardParams::scalar_isotropic(n, 0.9);
    let cfg_g = PgConfig::new(lambda_g, 1, Estimator::Reparameterized).unwrap();
    let trials = 200;
    let rows_g = 500; // 200 × 500 = 10⁵ joint samples of (X, Y, Ŷ)
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let xs = Matrix::from_fn(rows_g, n, |_, _| rng.uniform_range(-5.0, 5.0));
        let mut ys = Matrix::zeros(rows_g, n);
        for i in 0..rows_g {
            let y = truth.sample(&Vector::new(xs.row(i).to_vec()), &mut rng);
            for jj in 0..n {
                ys.set(i, jj, y[jj]);
            }
        }
        let f = GaussianPg::new(&gp, &xs, &ys, &reward_g, cfg_g, &mut rng).unwrap();
        let v = loss_value(&f, gp.params()).unwrap();
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / trials as f64;
    let var = (sum_sq / trials as f64 - mean * mean).max(0.0);
    let se = (var / trials as f64).sqrt();
    // loss = −(E[r] + λH) = −J in expectation
    let dev = (mean + j).abs();
    assert!(dev <= 3.0 * se, "PG loss mean {mean} vs −J {} ({}σ)", -j, dev / se);

    println!(
        "ACCEPTANCE 7 (estimator unbiasedness): PASS — categorical worst dev {worst_sigmas:.2}σ over 10⁶ draws; Gaussian loss dev {:.2}σ over 10⁵ draws [{:.1?}]",
        dev / se, t0.elapsed()
    );
}

// ---------------------------------------------------------------------------
// 8. Numerics suite
// ---------------------------------------------------------------------------

#[test]
fn acceptance_8_numerics_suite() {
    let t0 = std::time::Instant::now();
    let mut rng = RngStream::seed(808);
    let mut lines: Vec<String> = Vec::new();

    // gradient checks for every shipped loss/model pairing
    {
        let (xs, ys) = (
            Matrix::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.3], vec![-0.7, 0.9]]),
            Matrix::from_rows(&[vec![0.2, 0.1], vec![-0.4, 1.0], vec![0.8, -0.6]]),
        );
        for policy in [
            GaussianPolicy::linear(2, 2, &mut rng),
            GaussianPolicy::mlp(2, 2, &[8], &mut rng),
        ] {
            let nll = GaussianNll::new(&policy, &xs, &ys).unwrap();
            let g = gradient(&nll, policy.params()).unwrap();
            let fd = finite_diff_gradient(&nll, policy.params(), 1e-5).unwrap();
            assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4);

            let mse = MseLoss::new(&policy, &xs, &ys).unwrap();
            let g = gradient(&mse, policy.params()).unwrap();
            let fd = finite_diff_gradient(&mse, policy.params(), 1e-5).unwrap();
            assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4);

            let reward = RewardParams::diagonal(&[0.5, 2.0]);
            let cfg = PgConfig::new(0.7, 3, Estimator::Reparameterized).unwrap();
            let pg = GaussianPg::new(&policy, &xs, &ys, &reward, cfg, &mut rng).unwrap();
            let g = gradient(&pg, policy.params()).unwrap();
            let fd = finite_diff_gradient(&pg, policy.params(), 1e-5).unwrap();
            assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4);
        }
        let cat = CategoricalPolicy::new(2, 3, &mut rng);
        let labels = [0usize, 1, 2];
        let cnll = nllpo::objectives::CategoricalNll::new(&cat, &xs, &labels).unwrap();
        let g = gradient(&cnll, cat.params()).unwrap();
        let fd = finite_diff_gradient(&cnll, cat.params(), 1e-6).unwrap();
        assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4);

        let reward = RewardParams::identity(3);
        let cfg = PgConfig::new(0.5, 3, Estimator::ScoreFunction).unwrap();
        let cpg = CategoricalPg::new(&cat, &xs, &labels, &reward, cfg, &mut rng).unwrap();
        let g = gradient(&cpg, cat.params()).unwrap();
        let fd = finite_diff_gradient(&cpg, cat.params(), 1e-6).unwrap();
        assert!(max_rel_err(&g, &fd, 1e-6) < 1e-4);
        lines.push("gradient-vs-FD for all loss/model pairings within 1e-4".into());
    }

    // Hessian-vector products: symmetry, linearity, FD agreement
    {
        let mut policy = GaussianPolicy::mlp(2, 2, &[6], &mut rng);
        let (xs, ys) = (
            Matrix::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.3]]),
            Matrix::from_rows(&[vec![0.2, 0.1], vec![-0.4, 1.0]]),
        );
        let nll = GaussianNll::new(&policy, &xs, &ys).unwrap();
        let at = policy.params().clone();
        let dim = at.len();
        let u: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let hu = hvp(&nll, &at, &u).unwrap();
        let hw = hvp(&nll, &at, &w).unwrap();
        let duw: f64 = hu.iter().zip(&w).map(|(a, b)| a * b).sum();
        let dwu: f64 = hw.iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!((duw - dwu).abs() < 1e-8, "HVP symmetry");
        let combo: Vec<f64> = u.iter().zip(&w).map(|(a, b)| 0.6 * a - 1.1 * b).collect();
        let hc = hvp(&nll, &at, &combo).unwrap();
        for i in 0..dim {
            assert!((hc[i] - (0.6 * hu[i] - 1.1 * hw[i])).abs() < 1e-8, "HVP linearity");
        }
        let h = 1e-4;
        let mut plus = at.clone();
        let mut minus = at.clone();
        for i in 0..dim {
            plus.values_mut()[i] += h * u[i];
            minus.values_mut()[i] -= h * u[i];
        }
        let gp = gradient(&nll, &plus).unwrap();
        let gm = gradient(&nll, &minus).unwrap();
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(max_rel_err(&hu, &fd, 1e-4) < 1e-4, "HVP vs FD");
        policy.project_logvar();
        lines.push("HVP symmetry ≤1e-8, linearity ≤1e-8, FD agreement ≤1e-4".into());
    }

    // conjugate gradient vs direct Cholesky solve
    {
        let spd = random_spd(8, &mut rng, 0.5);
        let dense = spd.reconstruct();
        let rhs: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let res = cg_solve(
            |v: &[f64]| {
                let vv = Vector::new(v.to_vec());
                Ok::<_, nllpo::bilevel::BilevelError>(dense.mat_vec(&vv).unwrap().data().to_vec())
            },
            &rhs,
            CgConfig { max_iters: 8, tol: 1e-14 },
        )
        .unwrap();
        let direct = spd.solve(&Vector::new(rhs.clone())).unwrap();
        for i in 0..8 {
            assert!((res.solution[i] - direct[i]).abs() < 1e-6, "CG vs direct at {i}");
        }
        lines.push(format!("CG matches direct solve ≤1e-6 in {} ≤ 8 iterations", res.iters));
    }

    // KL and entropy identities
    {
        let sigma = random_spd(3, &mut rng, 0.3);
        assert!(reverse_kl_gaussian(&sigma, &sigma).unwrap().abs() < 1e-9);
        let b = random_spd(3, &mut rng, 0.3);
        assert!(reverse_kl_gaussian(&b, &sigma).unwrap() >= -1e-12);

        let mut p = GaussianPolicy::linear(1, 1, &mut rng);
        p.set_logvar(&[0.0]);
        let x = Vector::new(vec![0.0]);
        assert!((p.entropy(&x) - 0.5 * (1.0 + LOG_TAU)).abs() < 1e-12);

        // closed-form J equals the analytic pieces it is assembled from
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
        assert!((j - (-2.0 + (1.0 + LOG_TAU))).abs() < 1e-12);
        lines.push("reverse-KL and entropy identities hold".into());
    }

    // determinism: identical seed ⇒ byte-identical metrics files
    {
        let cfg = RunConfig {
            model: ModelKind::Linear,
            epochs: 3,
            data_rows: 300,
            ..RunConfig::default()
        };
        let bytes = |tag: &str| {
            let (data, truth) = build_dataset(&cfg, 9).unwrap();
            let mut rng = RngStream::seed(9);
            let out = train(&cfg, &data, truth.as_ref(), &mut rng).unwrap();
            let dir = std::env::temp_dir().join("nllpo_acceptance");
            std::fs::create_dir_all(&dir).unwrap();
            let path = dir.join(format!("det_{tag}.jsonl"));
            write_metrics_jsonl(&out.records, &path).unwrap();
            std::fs::read(&path).unwrap()
        };
        assert_eq!(bytes("a"), bytes("b"), "metrics bytes must be identical for equal seeds");
        lines.push("identical seed ⇒ byte-identical metrics".into());
    }

    println!("ACCEPTANCE 8 (numerics suite): PASS [{:.1?}]", t0.elapsed());
    for l in &lines {
        println!("  - {l}");
    }
}
