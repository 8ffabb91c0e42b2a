//! Experiment drivers: data generation and ingestion, the training loop for
//! every loss, evaluation metrics, the reward-landscape sweep, and the
//! flat-file run configuration behind the CLI.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::value_and_gradient;
use crate::bilevel::{
    heuristic_reward_residual, heuristic_reward_rows, solve_bilevel, BilevelConfig, BilevelError,
    BilevelTrace,
};
use crate::data::{
    generate_classification, generate_dynamics, generate_synthetic, load_csv, CsvSchema,
    CsvTarget, DataError, Dataset,
};
use crate::linalg::{Matrix, Vector};
use crate::models::{
    CategoricalPolicy, GaussianPolicy, LinearGaussianTruth, LOGVAR_MIN,
};
use crate::objectives::{
    CategoricalNll, CategoricalPg, Estimator, GaussianNll, GaussianPg, MseLoss, ObjectiveError,
    PgConfig, RewardParams,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// CLI contract: 0 success, 2 config error, 3 data error, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::Io(_) => 3,
            HarnessError::Numerical(_) => 4,
        }
    }
}

impl From<ObjectiveError> for HarnessError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::InvalidConfig(msg) => HarnessError::Config(msg),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

impl From<BilevelError> for HarnessError {
    fn from(e: BilevelError) -> Self {
        match e {
            BilevelError::InvalidConfig(msg) => HarnessError::Config(msg),
            BilevelError::TooFewSamples { need, got } => {
                HarnessError::Data(DataError::TooFewSamples { need, got })
            }
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Synth,
    Classify,
    Landscape,
    ClosedFormCheck,
    Regress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Nll,
    Mse,
    PgIdentity,
    PgHeuristic,
    PgImplicit,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "nll" => Ok(LossKind::Nll),
            "mse" => Ok(LossKind::Mse),
            "pg-identity" => Ok(LossKind::PgIdentity),
            "pg-heuristic" => Ok(LossKind::PgHeuristic),
            "pg-implicit" => Ok(LossKind::PgImplicit),
            other => Err(HarnessError::Config(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

/// Everything one experiment run needs. Field defaults follow the synthetic
/// experiment: n=2, m=2, N=2000, β=0.5, λ=1, Adam 1e-3, 400 epochs,
/// batch 128, 8 Monte-Carlo samples, 5 seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub loss: LossKind,
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub seeds: usize,
    pub out_dir: Option<PathBuf>,
    // synthetic regression data
    pub n: usize,
    pub m: usize,
    pub data_rows: usize,
    pub beta: f64,
    // classification data
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    pub imbalance: f64,
    pub data_path: Option<PathBuf>,
    pub feature_cols: Vec<String>,
    pub target_col: Option<String>,
    // landscape sweep
    pub u_min: f64,
    pub u_max: f64,
    pub u_points: usize,
    // implicit-differentiation solver
    pub bilevel: BilevelConfig,
    /// Use residual covariance instead of raw-target covariance in the
    /// heuristic reward.
    pub heuristic_residual: bool,
    /// Record wall-clock timings in metrics lines. Off by default so that
    /// identical seeds produce byte-identical metrics files.
    pub timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Synth,
            loss: LossKind::Nll,
            model: ModelKind::Mlp,
            hidden: vec![64, 64],
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            epochs: 400,
            batch_size: 128,
            lambda: 1.0,
            mc_samples: 8,
            seed: 0,
            seeds: 5,
            out_dir: None,
            n: 2,
            m: 2,
            data_rows: 2000,
            beta: 0.5,
            features: 6,
            classes: 2,
            separation: 0.5,
            imbalance: 0.25,
            data_path: None,
            feature_cols: Vec::new(),
            target_col: None,
            u_min: 0.25,
            u_max: 8.0,
            u_points: 16,
            bilevel: BilevelConfig::default(),
            heuristic_residual: false,
            timings: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.lambda > 0.0) {
            return Err(HarnessError::Config("lambda must be > 0".into()));
        }
        if self.mc_samples == 0 {
            return Err(HarnessError::Config("mc_samples must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(HarnessError::Config("lr must be > 0".into()));
        }
        if self.seeds == 0 {
            return Err(HarnessError::Config("seeds must be >= 1".into()));
        }
        if self.experiment == ExperimentKind::Landscape
            && (self.u_points == 0 || !(self.u_min > 0.0) || self.u_max < self.u_min)
        {
            return Err(HarnessError::Config("landscape grid must be positive and ordered".into()));
        }
        if self.loss == LossKind::Mse && self.experiment == ExperimentKind::Classify {
            return Err(HarnessError::Config("mse loss is undefined for classification".into()));
        }
        self.bilevel.validate().map_err(HarnessError::from)?;
        Ok(())
    }

    /// Applies one `key = value` pair from a config file; CLI flags reuse
    /// the same keys and override file values.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let bad = |what: &str, v: &str| {
            HarnessError::Config(format!("cannot parse {what} from {v:?}"))
        };
        match key {
            "experiment" => {
                self.experiment = match value {
                    "synth" => ExperimentKind::Synth,
                    "classify" => ExperimentKind::Classify,
                    "landscape" => ExperimentKind::Landscape,
                    "closed-form-check" => ExperimentKind::ClosedFormCheck,
                    "regress" => ExperimentKind::Regress,
                    other => return Err(HarnessError::Config(format!("unknown experiment {other:?}"))),
                }
            }
            "loss" => self.loss = LossKind::parse(value)?,
            "model" => {
                self.model = match value {
                    "linear" => ModelKind::Linear,
                    "mlp" => ModelKind::Mlp,
                    other => return Err(HarnessError::Config(format!("unknown model {other:?}"))),
                }
            }
            "hidden" => {
                self.hidden = value
                    .split([',', 'x'])
                    .map(|v| v.trim().parse::<usize>().map_err(|_| bad("hidden", value)))
                    .collect::<Result<_, _>>()?;
            }
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    other => return Err(HarnessError::Config(format!("unknown optimizer {other:?}"))),
                }
            }
            "lr" => self.lr = value.parse().map_err(|_| bad("lr", value))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("epochs", value))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("batch_size", value))?,
            "lambda" => self.lambda = value.parse().map_err(|_| bad("lambda", value))?,
            "mc_samples" => self.mc_samples = value.parse().map_err(|_| bad("mc_samples", value))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed", value))?,
            "seeds" => self.seeds = value.parse().map_err(|_| bad("seeds", value))?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "n" => self.n = value.parse().map_err(|_| bad("n", value))?,
            "m" => self.m = value.parse().map_err(|_| bad("m", value))?,
            "data_rows" => self.data_rows = value.parse().map_err(|_| bad("data_rows", value))?,
            "beta" => self.beta = value.parse().map_err(|_| bad("beta", value))?,
            "features" => self.features = value.parse().map_err(|_| bad("features", value))?,
            "classes" => self.classes = value.parse().map_err(|_| bad("classes", value))?,
            "separation" => self.separation = value.parse().map_err(|_| bad("separation", value))?,
            "imbalance" => self.imbalance = value.parse().map_err(|_| bad("imbalance", value))?,
            "data_path" => self.data_path = Some(PathBuf::from(value)),
            "feature_cols" => {
                self.feature_cols = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "target_col" => self.target_col = Some(value.to_string()),
            "u_min" => self.u_min = value.parse().map_err(|_| bad("u_min", value))?,
            "u_max" => self.u_max = value.parse().map_err(|_| bad("u_max", value))?,
            "u_points" => self.u_points = value.parse().map_err(|_| bad("u_points", value))?,
            "outer_iters" => {
                self.bilevel.outer_iters = value.parse().map_err(|_| bad("outer_iters", value))?
            }
            "inner_iters" => {
                self.bilevel.inner_iters = value.parse().map_err(|_| bad("inner_iters", value))?
            }
            "outer_lr" => self.bilevel.outer_lr = value.parse().map_err(|_| bad("outer_lr", value))?,
            "inner_lr" => self.bilevel.inner_lr = value.parse().map_err(|_| bad("inner_lr", value))?,
            "cg_max_iters" => {
                self.bilevel.cg_max_iters = value.parse().map_err(|_| bad("cg_max_iters", value))?
            }
            "cg_tol" => self.bilevel.cg_tol = value.parse().map_err(|_| bad("cg_tol", value))?,
            "warm_start" => {
                self.bilevel.warm_start = value.parse().map_err(|_| bad("warm_start", value))?
            }
            "inner_optimizer" => {
                self.bilevel.inner_optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    other => return Err(HarnessError::Config(format!("unknown optimizer {other:?}"))),
                }
            }
            "outer_optimizer" => {
                self.bilevel.outer_optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    other => return Err(HarnessError::Config(format!("unknown optimizer {other:?}"))),
                }
            }
            "heuristic_residual" => {
                self.heuristic_residual =
                    value.parse().map_err(|_| bad("heuristic_residual", value))?
            }
            "timings" => self.timings = value.parse().map_err(|_| bad("timings", value))?,
            other => return Err(HarnessError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Reads a flat `key = value` config file (# starts a comment).
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {} is not key = value", lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// One metrics line per epoch; absent fields are undefined for the
/// experiment kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

impl MetricsRecord {
    fn empty(epoch: usize) -> Self {
        Self {
            epoch,
            train_nll: None,
            val_nll: None,
            val_mse: None,
            mean_err: None,
            var_err: None,
            accuracy: None,
            auc: None,
            wall_ms: None,
        }
    }
}

pub fn write_metrics_jsonl(records: &[MetricsRecord], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r).expect("metrics serialize"))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Gaussian(GaussianPolicy),
    Categorical(CategoricalPolicy),
}

/// Failure mode of identity-reward PG on low-noise data: variance pinned
/// at the clamp floor or an NLL that got worse than where it started.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Instability {
    pub clamp_engaged: bool,
    pub nll_diverged: bool,
}

impl Instability {
    pub fn flagged(&self) -> bool {
        self.clamp_engaged || self.nll_diverged
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub records: Vec<MetricsRecord>,
    pub reward: Option<RewardParams>,
    pub instability: Instability,
    /// Some(reason) if training aborted on a non-finite loss; the metrics
    /// collected up to that point are preserved.
    pub aborted: Option<String>,
    pub bilevel_trace: Option<BilevelTrace>,
}

/// Mean ‖μ_θ(x) − Λx‖ and mean ‖σ²_θ(x) − diag Σ‖ over probe inputs.
pub fn evaluate_moments(
    model: &GaussianPolicy,
    truth: &LinearGaussianTruth,
    probes: &Matrix,
) -> (f64, f64) {
    let n = truth.output_dim();
    let sigma_diag: Vec<f64> = (0..n).map(|j| truth.sigma.reconstruct().get(j, j)).collect();
    let mut mean_err = 0.0;
    let mut var_err = 0.0;
    for i in 0..probes.rows() {
        let x = Vector::new(probes.row(i).to_vec());
        let (mu, lv) = model.mean_and_logvar(&x);
        let target = truth.mean(&x);
        mean_err += mu.sub(&target).norm();
        let var_diff: f64 = (0..n)
            .map(|j| {
                let d = lv[j].exp() - sigma_diag[j];
                d * d
            })
            .sum::<f64>()
            .sqrt();
        var_err += var_diff;
    }
    let count = probes.rows().max(1) as f64;
    (mean_err / count, var_err / count)
}

/// Accuracy and, for binary tasks, AUC by the rank statistic with ties
/// averaged.
pub fn evaluate_classifier(
    model: &CategoricalPolicy,
    xs: &Matrix,
    labels: &[usize],
) -> (f64, Option<f64>) {
    let n = xs.rows();
    assert_eq!(labels.len(), n);
    let mut correct = 0usize;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let x = Vector::new(xs.row(i).to_vec());
        let probs = model.probs(&x);
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        if argmax == labels[i] {
            correct += 1;
        }
        if model.classes() == 2 {
            scores.push(probs[1]);
        }
    }
    let accuracy = correct as f64 / n as f64;
    let auc = if model.classes() == 2 { Some(auc_rank(&scores, labels)) } else { None };
    (accuracy, auc)
}

/// Mann-Whitney AUC: mean rank of positives over all scores, ties averaged.
fn auc_rank(scores: &[f64], labels: &[usize]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for k in i..=j {
            ranks[order[k]] = avg_rank;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|l| **l == 1).count() as f64;
    let neg = n as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    let rank_sum: f64 = (0..n).filter(|i| labels[*i] == 1).map(|i| ranks[i]).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

fn build_gaussian_policy(run: &RunConfig, input_dim: usize, output_dim: usize, rng: &mut RngStream) -> GaussianPolicy {
    match run.model {
        ModelKind::Linear => GaussianPolicy::linear(input_dim, output_dim, rng),
        ModelKind::Mlp => GaussianPolicy::mlp(input_dim, output_dim, &run.hidden, rng),
    }
}

/// Resolves the reward for a PG loss kind; `pg-implicit` runs the
/// implicit-differentiation solver on a fresh linear policy first.
fn resolve_reward(
    run: &RunConfig,
    data: &Dataset,
    rng: &mut RngStream,
) -> Result<(Option<RewardParams>, Option<BilevelTrace>), HarnessError> {
    let n = data.target_dim();
    match run.loss {
        LossKind::Nll | LossKind::Mse => Ok((None, None)),
        LossKind::PgIdentity => Ok((Some(RewardParams::identity(n)), None)),
        LossKind::PgHeuristic => {
            let train_targets = data.targets_rows(&data.split.train);
            let reward = if run.heuristic_residual {
                let mut train_view = data.clone();
                train_view.inputs = data.inputs_rows(&data.split.train);
                train_view.targets = crate::data::Targets::Continuous(train_targets);
                let rows = train_view.inputs.rows();
                train_view.split.train = (0..rows).collect();
                train_view.split.val = Vec::new();
                train_view.split.test = Vec::new();
                heuristic_reward_residual(&train_view, run.lambda)?
            } else {
                heuristic_reward_rows(&train_targets, run.lambda)?
            };
            Ok((Some(reward), None))
        }
        LossKind::PgImplicit => {
            let mut cfg = run.bilevel.clone();
            cfg.lambda = run.lambda;
            cfg.mc_samples = run.mc_samples;
            let solver_policy =
                GaussianPolicy::linear(data.input_dim(), n, rng);
            let (reward, _, trace) = solve_bilevel(
                data,
                solver_policy,
                RewardParams::scalar_isotropic(n, 1.0),
                &cfg,
                rng,
            )
            .map_err(HarnessError::from)?;
            Ok((Some(reward), Some(trace)))
        }
    }
}

struct GaussianEval<'a> {
    data: &'a Dataset,
    truth: Option<&'a LinearGaussianTruth>,
    val_xs: Matrix,
    val_ys: Matrix,
    train_xs: Matrix,
    train_ys: Matrix,
}

impl GaussianEval<'_> {
    fn record(&self, policy: &GaussianPolicy, epoch: usize) -> MetricsRecord {
        let mut rec = MetricsRecord::empty(epoch);
        if let Ok(f) = GaussianNll::new(policy, &self.train_xs, &self.train_ys) {
            rec.train_nll = crate::autodiff::loss_value(&f, policy.params()).ok();
        }
        if let Ok(f) = GaussianNll::new(policy, &self.val_xs, &self.val_ys) {
            rec.val_nll = crate::autodiff::loss_value(&f, policy.params()).ok();
        }
        if let Ok(f) = MseLoss::new(policy, &self.val_xs, &self.val_ys) {
            rec.val_mse = crate::autodiff::loss_value(&f, policy.params()).ok();
        }
        if let Some(truth) = self.truth {
            let (me, ve) = evaluate_moments(policy, truth, &self.val_xs);
            rec.mean_err = Some(me);
            rec.var_err = Some(ve);
        }
        let _ = self.data;
        rec
    }

    /// Smallest realized log-variance over the validation inputs.
    fn min_logvar(&self, policy: &GaussianPolicy) -> f64 {
        let mut min_lv = f64::INFINITY;
        for i in 0..self.val_xs.rows() {
            let x = Vector::new(self.val_xs.row(i).to_vec());
            let (_, lv) = policy.mean_and_logvar(&x);
            for j in 0..lv.dim() {
                min_lv = min_lv.min(lv[j]);
            }
        }
        min_lv
    }
}

/// Trains the configured model with the configured loss, one record per
/// epoch (plus an epoch-0 baseline). Non-finite losses abort and preserve
/// the partial metrics.
pub fn train(
    run: &RunConfig,
    data: &Dataset,
    truth: Option<&LinearGaussianTruth>,
    rng: &mut RngStream,
) -> Result<TrainOutput, HarnessError> {
    run.validate()?;
    if data.is_classification() {
        train_categorical(run, data, rng)
    } else {
        train_gaussian(run, data, truth, rng)
    }
}

fn train_gaussian(
    run: &RunConfig,
    data: &Dataset,
    truth: Option<&LinearGaussianTruth>,
    rng: &mut RngStream,
) -> Result<TrainOutput, HarnessError> {
    let (reward, bilevel_trace) = resolve_reward(run, data, rng)?;
    let mut policy = build_gaussian_policy(run, data.input_dim(), data.target_dim(), rng);
    let pg_cfg = PgConfig::new(run.lambda, run.mc_samples, Estimator::Reparameterized)?;

    let eval = GaussianEval {
        data,
        truth,
        val_xs: data.inputs_rows(&data.split.val),
        val_ys: data.targets_rows(&data.split.val),
        train_xs: data.inputs_rows(&data.split.train),
        train_ys: data.targets_rows(&data.split.train),
    };

    let mut records = vec![eval.record(&policy, 0)];
    let mut instability = Instability::default();
    let mut aborted = None;

    let mut opt = Optimizer::new(run.optimizer, run.lr, policy.params().len());
    let mut train_idx = data.split.train.clone();

    'epochs: for epoch in 1..=run.epochs {
        let start = Instant::now();
        rng.shuffle(&mut train_idx);
        for chunk in train_idx.chunks(run.batch_size) {
            let xs = data.inputs_rows(chunk);
            let ys = data.targets_rows(chunk);
            let grad = {
                let result = match run.loss {
                    LossKind::Nll => {
                        let f = GaussianNll::new(&policy, &xs, &ys)?;
                        value_and_gradient(&f, policy.params())
                    }
                    LossKind::Mse => {
                        let f = MseLoss::new(&policy, &xs, &ys)?;
                        value_and_gradient(&f, policy.params())
                    }
                    LossKind::PgIdentity | LossKind::PgHeuristic | LossKind::PgImplicit => {
                        let f = GaussianPg::new(
                            &policy,
                            &xs,
                            &ys,
                            reward.as_ref().expect("pg loss has a reward"),
                            pg_cfg,
                            rng,
                        )?;
                        value_and_gradient(&f, policy.params())
                    }
                };
                match result {
                    Ok((_, g)) => g,
                    Err(crate::autodiff::AutodiffError::NonFiniteLoss) => {
                        aborted = Some(format!("non-finite loss at epoch {epoch}"));
                        instability.nll_diverged = true;
                        break 'epochs;
                    }
                    Err(e) => return Err(HarnessError::Numerical(e.to_string())),
                }
            };
            if opt.step(policy.params_mut().values_mut(), &grad).is_err() {
                aborted = Some(format!("non-finite parameters at epoch {epoch}"));
                instability.nll_diverged = true;
                break 'epochs;
            }
            policy.project_logvar();
        }
        let mut rec = eval.record(&policy, epoch);
        if run.timings {
            rec.wall_ms = Some(start.elapsed().as_millis() as u64);
        }
        if eval.min_logvar(&policy) <= LOGVAR_MIN + 1e-6 {
            instability.clamp_engaged = true;
        }
        match rec.val_nll {
            Some(v) if v.is_finite() => {}
            _ => instability.nll_diverged = true,
        }
        records.push(rec);
    }

    // "diverging NLL": the validation NLL ends at least a nat above the
    // best value it reached during the run
    let min_val_nll = records
        .iter()
        .filter_map(|r| r.val_nll)
        .fold(f64::INFINITY, f64::min);
    if let Some(last) = records.last().and_then(|r| r.val_nll) {
        if last > min_val_nll + 1.0 {
            instability.nll_diverged = true;
        }
    }

    Ok(TrainOutput {
        model: TrainedModel::Gaussian(policy),
        records,
        reward,
        instability,
        aborted,
        bilevel_trace,
    })
}

fn train_categorical(
    run: &RunConfig,
    data: &Dataset,
    rng: &mut RngStream,
) -> Result<TrainOutput, HarnessError> {
    if matches!(run.loss, LossKind::Mse) {
        return Err(HarnessError::Config("mse loss is undefined for classification".into()));
    }
    let (reward, bilevel_trace) = match run.loss {
        LossKind::PgImplicit => {
            // the solver works on the one-hot regression view of the labels
            let (r, t) = resolve_reward(run, data, rng)?;
            (r, t)
        }
        _ => resolve_reward(run, data, rng)?,
    };
    let mut policy = CategoricalPolicy::new(data.input_dim(), data.target_dim(), rng);
    let pg_cfg = PgConfig::new(run.lambda, run.mc_samples, Estimator::ScoreFunction)?;

    let val_xs = data.inputs_rows(&data.split.val);
    let val_labels = data.labels_rows(&data.split.val);
    let train_xs = data.inputs_rows(&data.split.train);
    let train_labels = data.labels_rows(&data.split.train);

    let record = |policy: &CategoricalPolicy, epoch: usize| -> MetricsRecord {
        let mut rec = MetricsRecord::empty(epoch);
        if let Ok(f) = CategoricalNll::new(policy, &train_xs, &train_labels) {
            rec.train_nll = crate::autodiff::loss_value(&f, policy.params()).ok();
        }
        if let Ok(f) = CategoricalNll::new(policy, &val_xs, &val_labels) {
            rec.val_nll = crate::autodiff::loss_value(&f, policy.params()).ok();
        }
        let (acc, auc) = evaluate_classifier(policy, &val_xs, &val_labels);
        rec.accuracy = Some(acc);
        rec.auc = auc;
        rec
    };

    let mut records = vec![record(&policy, 0)];
    let mut aborted = None;
    let mut opt = Optimizer::new(run.optimizer, run.lr, policy.params().len());
    let mut train_idx = data.split.train.clone();

    'epochs: for epoch in 1..=run.epochs {
        let start = Instant::now();
        rng.shuffle(&mut train_idx);
        for chunk in train_idx.chunks(run.batch_size) {
            let xs = data.inputs_rows(chunk);
            let labels = data.labels_rows(chunk);
            let grad = {
                let result = match run.loss {
                    LossKind::Nll => {
                        let f = CategoricalNll::new(&policy, &xs, &labels)?;
                        value_and_gradient(&f, policy.params())
                    }
                    _ => {
                        let f = CategoricalPg::new(
                            &policy,
                            &xs,
                            &labels,
                            reward.as_ref().expect("pg loss has a reward"),
                            pg_cfg,
                            rng,
                        )?;
                        value_and_gradient(&f, policy.params())
                    }
                };
                match result {
                    Ok((_, g)) => g,
                    Err(crate::autodiff::AutodiffError::NonFiniteLoss) => {
                        aborted = Some(format!("non-finite loss at epoch {epoch}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(HarnessError::Numerical(e.to_string())),
                }
            };
            if opt.step(policy.params_mut().values_mut(), &grad).is_err() {
                aborted = Some(format!("non-finite parameters at epoch {epoch}"));
                break 'epochs;
            }
        }
        let mut rec = record(&policy, epoch);
        if run.timings {
            rec.wall_ms = Some(start.elapsed().as_millis() as u64);
        }
        records.push(rec);
    }

    Ok(TrainOutput {
        model: TrainedModel::Categorical(policy),
        records,
        reward,
        instability: Instability::default(),
        aborted,
        bilevel_trace,
    })
}

/// Builds the dataset a config describes (generated or loaded from CSV).
pub fn build_dataset(
    run: &RunConfig,
    seed: u64,
) -> Result<(Dataset, Option<LinearGaussianTruth>), HarnessError> {
    match run.experiment {
        ExperimentKind::Synth | ExperimentKind::Landscape | ExperimentKind::ClosedFormCheck => {
            let (d, t) = generate_synthetic(run.n, run.m, run.data_rows, run.beta, seed);
            Ok((d, Some(t)))
        }
        ExperimentKind::Regress => {
            let action_dim = run.m.saturating_sub(run.n).max(1);
            Ok((generate_dynamics(run.n, action_dim, run.data_rows, run.beta, seed), None))
        }
        ExperimentKind::Classify => match &run.data_path {
            Some(path) => {
                if run.feature_cols.is_empty() || run.target_col.is_none() {
                    return Err(HarnessError::Config(
                        "classify from CSV needs feature_cols and target_col".into(),
                    ));
                }
                let schema = CsvSchema {
                    features: run.feature_cols.clone(),
                    target: CsvTarget::Classification(run.target_col.clone().unwrap()),
                    standardize: true,
                    seed,
                };
                Ok((load_csv(path, &schema)?, None))
            }
            None => Ok((
                generate_classification(
                    run.features,
                    run.classes,
                    run.data_rows,
                    run.separation,
                    run.imbalance,
                    seed,
                ),
                None,
            )),
        },
    }
}

/// Sweeps the isotropic reward u over a grid, training the inner problem to
/// convergence at each point and recording the converged outer validation
/// NLL. A non-finite point is recorded as missing and the sweep continues.
pub fn landscape_sweep(
    data: &Dataset,
    truth: Option<&LinearGaussianTruth>,
    u_grid: &[f64],
    run: &RunConfig,
    rng_seed: u64,
) -> Result<Vec<(f64, Option<f64>)>, HarnessError> {
    let mut out = Vec::with_capacity(u_grid.len());
    for (i, u) in u_grid.iter().enumerate() {
        if !(*u > 0.0) {
            return Err(HarnessError::Config(format!("u grid must be positive, got {u}")));
        }
        let mut point_cfg = run.clone();
        point_cfg.experiment = ExperimentKind::Synth;
        point_cfg.loss = LossKind::PgIdentity;
        let mut rng = RngStream::substream(rng_seed, 100 + i as u64);
        let reward = RewardParams::scalar_isotropic(data.target_dim(), *u);
        let nll = train_at_fixed_reward(&point_cfg, data, truth, reward, &mut rng)?;
        out.push((*u, nll));
    }
    Ok(out)
}

fn train_at_fixed_reward(
    run: &RunConfig,
    data: &Dataset,
    truth: Option<&LinearGaussianTruth>,
    reward: RewardParams,
    rng: &mut RngStream,
) -> Result<Option<f64>, HarnessError> {
    let mut policy = build_gaussian_policy(run, data.input_dim(), data.target_dim(), rng);
    let pg_cfg = PgConfig::new(run.lambda, run.mc_samples, Estimator::Reparameterized)?;
    let mut opt = Optimizer::new(run.optimizer, run.lr, policy.params().len());
    let mut train_idx = data.split.train.clone();
    let _ = truth;
    for _ in 1..=run.epochs {
        rng.shuffle(&mut train_idx);
        for chunk in train_idx.chunks(run.batch_size) {
            let xs = data.inputs_rows(chunk);
            let ys = data.targets_rows(chunk);
            let grad = {
                let f = GaussianPg::new(&policy, &xs, &ys, &reward, pg_cfg, rng)?;
                match value_and_gradient(&f, policy.params()) {
                    Ok((_, g)) => g,
                    Err(crate::autodiff::AutodiffError::NonFiniteLoss) => return Ok(None),
                    Err(e) => return Err(HarnessError::Numerical(e.to_string())),
                }
            };
            if opt.step(policy.params_mut().values_mut(), &grad).is_err() {
                return Ok(None);
            }
            policy.project_logvar();
        }
    }
    let val_xs = data.inputs_rows(&data.split.val);
    let val_ys = data.targets_rows(&data.split.val);
    let f = GaussianNll::new(&policy, &val_xs, &val_ys)?;
    match crate::autodiff::loss_value(&f, policy.params()) {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Ok(None),
    }
}

pub fn write_sweep_csv(rows: &[(f64, Option<f64>)], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "u,outer_nll")?;
    for (u, nll) in rows {
        match nll {
            Some(v) => writeln!(file, "{u},{v}")?,
            None => writeln!(file, "{u},")?,
        }
    }
    Ok(())
}

/// First epoch whose value is within `frac` of the final value, for
/// convergence-speed comparisons.
pub fn epochs_to_within(values: &[(usize, f64)], frac: f64) -> Option<usize> {
    let (_, last) = *values.last()?;
    let thresh = last.abs() * frac;
    values
        .iter()
        .find(|(_, v)| (v - last).abs() <= thresh)
        .map(|(e, _)| *e)
}

/// Final-metric summary of one seed's run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_val_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_val_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_mean_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_var_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_u: Option<Vec<f64>>,
    pub instability: Instability,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std_err: f64,
    pub count: usize,
}

pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some(Aggregate { mean, std_err: (var / n).sqrt(), count: values.len() })
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub seeds: Vec<SeedSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_nll: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_auc: Option<Aggregate>,
    pub elapsed_ms: u64,
    pub outputs: Vec<PathBuf>,
}

fn ensure_out_dir(run: &RunConfig) -> Result<Option<PathBuf>, HarnessError> {
    match &run.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Ok(Some(dir.clone()))
        }
        None => Ok(None),
    }
}

/// Runs one training experiment over `run.seeds` seeds (synth, regress, or
/// classify) and writes per-seed metrics, checkpoints, and a summary.
pub fn run_training_experiment(run: &RunConfig) -> Result<RunSummary, HarnessError> {
    run.validate()?;
    let started = Instant::now();
    let out_dir = ensure_out_dir(run)?;
    let mut outputs = Vec::new();
    let mut seed_summaries = Vec::new();

    for k in 0..run.seeds {
        let seed = run.seed + k as u64;
        let (data, truth) = build_dataset(run, seed)?;
        let mut rng = RngStream::seed(seed);
        let out = train(run, &data, truth.as_ref(), &mut rng)?;

        let last = out.records.last().expect("at least the baseline record");
        let mut summary = SeedSummary {
            seed,
            final_val_nll: last.val_nll,
            final_val_mse: last.val_mse,
            final_mean_err: last.mean_err,
            final_var_err: last.var_err,
            test_accuracy: None,
            test_auc: None,
            reward_u: out.reward.as_ref().map(|r| r.u_summary()),
            instability: out.instability,
            aborted: out.aborted.clone(),
        };

        if let TrainedModel::Categorical(policy) = &out.model {
            let test_xs = data.inputs_rows(&data.split.test);
            let test_labels = data.labels_rows(&data.split.test);
            let (acc, auc) = evaluate_classifier(policy, &test_xs, &test_labels);
            summary.test_accuracy = Some(acc);
            summary.test_auc = auc;
        }

        if let Some(dir) = &out_dir {
            let metrics_path = dir.join(format!("metrics_seed{seed}.jsonl"));
            write_metrics_jsonl(&out.records, &metrics_path)?;
            outputs.push(metrics_path);
            let ckpt_path = dir.join(format!("policy_seed{seed}.ckpt"));
            match &out.model {
                TrainedModel::Gaussian(p) => p
                    .save(&ckpt_path)
                    .map_err(|e| HarnessError::Numerical(e.to_string()))?,
                TrainedModel::Categorical(p) => p
                    .save(&ckpt_path)
                    .map_err(|e| HarnessError::Numerical(e.to_string()))?,
            }
            outputs.push(ckpt_path);
            if let Some(trace) = &out.bilevel_trace {
                let trace_path = dir.join(format!("bilevel_trace_seed{seed}.jsonl"));
                trace.write_jsonl(&trace_path)?;
                outputs.push(trace_path);
            }
        }
        seed_summaries.push(summary);
    }

    let collect = |f: fn(&SeedSummary) -> Option<f64>| -> Vec<f64> {
        seed_summaries.iter().filter_map(f).collect()
    };
    let summary = RunSummary {
        config: run.clone(),
        val_nll: aggregate(&collect(|s| s.final_val_nll)),
        val_mse: aggregate(&collect(|s| s.final_val_mse)),
        test_accuracy: aggregate(&collect(|s| s.test_accuracy)),
        test_auc: aggregate(&collect(|s| s.test_auc)),
        seeds: seed_summaries,
        elapsed_ms: started.elapsed().as_millis() as u64,
        outputs,
    };
    write_summary(run, &summary)?;
    Ok(summary)
}

/// Runs the reward-landscape sweep and writes `sweep.csv`.
pub fn run_landscape(run: &RunConfig) -> Result<Vec<(f64, Option<f64>)>, HarnessError> {
    run.validate()?;
    let out_dir = ensure_out_dir(run)?;
    let (data, truth) = build_dataset(run, run.seed)?;
    let grid: Vec<f64> = if run.u_points == 1 {
        vec![run.u_min]
    } else {
        // log-spaced grid, sorted ascending
        let (lo, hi) = (run.u_min.ln(), run.u_max.ln());
        (0..run.u_points)
            .map(|i| (lo + (hi - lo) * i as f64 / (run.u_points - 1) as f64).exp())
            .collect()
    };
    let rows = landscape_sweep(&data, truth.as_ref(), &grid, run, run.seed)?;
    if let Some(dir) = &out_dir {
        write_sweep_csv(&rows, dir.join("sweep.csv"))?;
    }
    Ok(rows)
}

/// One line of the closed-form validation battery.
#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Validates the analytic solutions on random instances: U*Σ = (λ/2)I,
/// moment matching B*(U*) = Σ, family-trace membership, and the vanishing
/// inner gradient at θ*.
pub fn run_closed_form_check(run: &RunConfig) -> Result<Vec<CheckLine>, HarnessError> {
    use crate::closed_form::{
        inner_solution, isotropic_reward, optimal_reward, verify_family, LinearGaussianParams,
        NegClosedFormJ,
    };
    run.validate()?;
    let out_dir = ensure_out_dir(run)?;
    let mut rng = RngStream::seed(run.seed);
    let mut lines = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        lines.push(CheckLine { name: name.to_string(), passed, detail });
    };

    for trial in 0..6 {
        let n = [1, 2, 4][trial % 3];
        let lambda = [0.5, 1.0, 2.0][trial / 3 + trial % 2];
        let g = Matrix::from_fn(n, n, |_, _| rng.normal());
        let mut dense = g.transpose().matmul(&g).unwrap();
        for i in 0..n {
            dense.set(i, i, dense.get(i, i) + 0.3);
        }
        let sigma = dense.cholesky().map_err(|e| HarnessError::Numerical(e.to_string()))?;

        let u_star = optimal_reward(&sigma, lambda).map_err(|e| HarnessError::Numerical(e.to_string()))?;
        let prod = u_star.reconstruct().matmul(&sigma.reconstruct()).unwrap();
        let err = prod.sub(&Matrix::identity(n).scale(lambda / 2.0)).unwrap().max_abs();
        push(
            &format!("outer_optimum_n{n}_l{lambda}"),
            err < 1e-8,
            format!("‖U*Σ − (λ/2)I‖∞ = {err:.2e}"),
        );

        let truth = LinearGaussianTruth::new(
            Matrix::from_fn(n, n, |_, _| rng.uniform_range(-1.0, 1.0)),
            sigma.clone(),
        );
        let sol = inner_solution(&u_star, &truth, lambda)
            .map_err(|e| HarnessError::Numerical(e.to_string()))?;
        let mm = sol.b_star.reconstruct().sub(&sigma.reconstruct()).unwrap().max_abs();
        push(
            &format!("moment_matching_n{n}_l{lambda}"),
            mm < 1e-8,
            format!("‖B*(U*) − Σ‖∞ = {mm:.2e}"),
        );

        let u_iso = isotropic_reward(&sigma, lambda);
        let embedded = crate::linalg::SpdMatrix::from_diag(&vec![u_iso; n]);
        push(
            &format!("family_trace_n{n}_l{lambda}"),
            verify_family(&embedded, &sigma, lambda, 1e-9),
            format!("u = {u_iso:.6}"),
        );

        let layout = LinearGaussianParams::new(&sol.a_star, &sol.b_star);
        let loss = NegClosedFormJ {
            layout: layout.clone(),
            truth,
            u: u_star,
            lambda,
            sigma_x: crate::linalg::SpdMatrix::identity(n),
        };
        let grad = crate::autodiff::gradient(&loss, &layout.pv)
            .map_err(|e| HarnessError::Numerical(e.to_string()))?;
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        push(
            &format!("stationarity_n{n}_l{lambda}"),
            norm < 1e-6,
            format!("‖∇J(θ*)‖ = {norm:.2e}"),
        );
    }

    if let Some(dir) = &out_dir {
        let path = dir.join("closed_form_report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&lines).expect("report serializes"))?;
    }
    Ok(lines)
}

fn write_summary(run: &RunConfig, summary: &RunSummary) -> Result<(), HarnessError> {
    if let Some(dir) = &run.out_dir {
        let path = dir.join("run_summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(summary).expect("summary serializes"))?;
    }
    Ok(())
}
