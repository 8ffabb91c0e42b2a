//! Probabilistic models: the linear-Gaussian data generator, learned Gaussian
//! policies (linear or MLP-headed, diagonal covariance), and the softmax
//! policy for classification.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{bind, Bound, NodeId, ParamVector, Scalar, SegmentId, Tape};
use crate::linalg::{Matrix, SpdMatrix, Vector};
use crate::rng::RngStream;

/// Diagonal log-variances are clamped to this range; it is what keeps the
/// identity-reward policy-gradient run from collapsing variance to zero.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

pub(crate) const LOG_TAU: f64 = 1.8378770664093453; // ln(2π)

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// The data-generating process Y|X ~ N(ΛX, Σ).
#[derive(Debug, Clone)]
pub struct LinearGaussianTruth {
    pub lambda: Matrix,
    pub sigma: SpdMatrix,
}

impl LinearGaussianTruth {
    pub fn new(lambda: Matrix, sigma: SpdMatrix) -> Self {
        assert_eq!(lambda.rows(), sigma.dim(), "Λ rows must match Σ dim");
        Self { lambda, sigma }
    }

    pub fn input_dim(&self) -> usize {
        self.lambda.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.lambda.rows()
    }

    pub fn mean(&self, x: &Vector) -> Vector {
        self.lambda.mat_vec(x).expect("input dimension")
    }

    /// Draws Λx + L_Σ·z with z standard normal.
    pub fn sample(&self, x: &Vector, rng: &mut RngStream) -> Vector {
        let n = self.output_dim();
        let z = Vector::new((0..n).map(|_| rng.normal()).collect());
        let mut out = self.mean(x);
        let l = self.sigma.factor();
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += l.get(i, k) * z[k];
            }
            out[i] += acc;
        }
        out
    }

    /// Differential entropy ½ log((2πe)^n det Σ), which is also the
    /// population NLL of the truth model on its own data.
    pub fn entropy(&self) -> f64 {
        let n = self.output_dim() as f64;
        0.5 * (n * (LOG_TAU + 1.0) + self.sigma.log_det())
    }
}

/// Architecture of a Gaussian policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GaussianArch {
    /// Mean A·x with no bias, constant diagonal log-variance.
    Linear,
    /// Shared ReLU trunk, separate linear heads for mean and log-variance.
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone)]
struct GaussianSegs {
    trunk: Vec<(SegmentId, SegmentId)>,
    mean_w: SegmentId,
    mean_b: Option<SegmentId>,
    logvar_w: Option<SegmentId>,
    logvar_b: SegmentId,
}

/// Conditional Gaussian policy Ŷ|X ~ N(μ_θ(x), diag(σ²_θ(x))).
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    input_dim: usize,
    output_dim: usize,
    arch: GaussianArch,
    params: ParamVector,
    segs: GaussianSegs,
}

fn uniform_init(rng: &mut RngStream, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.uniform_range(-bound, bound)).collect()
}

impl GaussianPolicy {
    /// Linear policy matching the tractable setting: μ = A·x, constant σ².
    pub fn linear(input_dim: usize, output_dim: usize, rng: &mut RngStream) -> Self {
        let mut params = ParamVector::new();
        // weights stored input-major (m×n) so batches multiply as X·W
        let w = params.push_segment(
            "mean_w",
            input_dim,
            output_dim,
            uniform_init(rng, input_dim, input_dim * output_dim),
        );
        let lv = params.push_segment("logvar", 1, output_dim, vec![0.0; output_dim]);
        Self {
            input_dim,
            output_dim,
            arch: GaussianArch::Linear,
            params,
            segs: GaussianSegs {
                trunk: Vec::new(),
                mean_w: w,
                mean_b: None,
                logvar_w: None,
                logvar_b: lv,
            },
        }
    }

    /// MLP policy: ReLU trunk plus separate mean / log-variance heads.
    /// The log-variance head bias starts at 0 so training begins near σ = 1.
    pub fn mlp(input_dim: usize, output_dim: usize, hidden: &[usize], rng: &mut RngStream) -> Self {
        assert!(!hidden.is_empty(), "mlp needs at least one hidden layer");
        let mut params = ParamVector::new();
        let mut trunk = Vec::new();
        let mut prev = input_dim;
        for (i, h) in hidden.iter().enumerate() {
            let w = params.push_segment(
                &format!("trunk_w{i}"),
                prev,
                *h,
                uniform_init(rng, prev, prev * h),
            );
            let b = params.push_segment(&format!("trunk_b{i}"), 1, *h, uniform_init(rng, prev, *h));
            trunk.push((w, b));
            prev = *h;
        }
        let mean_w = params.push_segment(
            "mean_head_w",
            prev,
            output_dim,
            uniform_init(rng, prev, prev * output_dim),
        );
        let mean_b =
            params.push_segment("mean_head_b", 1, output_dim, uniform_init(rng, prev, output_dim));
        let logvar_w = params.push_segment(
            "logvar_head_w",
            prev,
            output_dim,
            uniform_init(rng, prev, prev * output_dim),
        );
        let logvar_b = params.push_segment("logvar_head_b", 1, output_dim, vec![0.0; output_dim]);
        Self {
            input_dim,
            output_dim,
            arch: GaussianArch::Mlp { hidden: hidden.to_vec() },
            params,
            segs: GaussianSegs {
                trunk,
                mean_w,
                mean_b: Some(mean_b),
                logvar_w: Some(logvar_w),
                logvar_b,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn arch(&self) -> &GaussianArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// For the linear policy, the mean map A (n×m) of μ = A·x.
    pub fn mean_matrix(&self) -> Matrix {
        assert_eq!(self.arch, GaussianArch::Linear);
        let seg = self.params.segment(self.segs.mean_w).clone();
        let w = self.params.slice(self.segs.mean_w);
        Matrix::from_fn(seg.cols, seg.rows, |i, j| w[j * seg.cols + i])
    }

    pub fn set_mean_matrix(&mut self, a: &Matrix) {
        assert_eq!(self.arch, GaussianArch::Linear);
        assert_eq!((a.rows(), a.cols()), (self.output_dim, self.input_dim));
        let cols = self.output_dim;
        let slice = self.params.slice_mut(self.segs.mean_w);
        for i in 0..a.cols() {
            for j in 0..a.rows() {
                slice[i * cols + j] = a.get(j, i);
            }
        }
    }

    /// For the linear policy, overwrite the constant log-variance vector.
    pub fn set_logvar(&mut self, logvar: &[f64]) {
        assert_eq!(self.arch, GaussianArch::Linear);
        self.params.slice_mut(self.segs.logvar_b).copy_from_slice(logvar);
        self.project_logvar();
    }

    pub fn logvar_values(&self) -> Vec<f64> {
        self.params.slice(self.segs.logvar_b).to_vec()
    }

    /// Projects the constant log-variance segment back into the clamp range.
    /// MLP heads clamp their output in-graph instead.
    pub fn project_logvar(&mut self) {
        if self.arch == GaussianArch::Linear {
            for v in self.params.slice_mut(self.segs.logvar_b) {
                *v = v.clamp(LOGVAR_MIN, LOGVAR_MAX);
            }
        }
    }

    /// Builds μ and clamped log-variance for a batch node (rows×input_dim).
    pub fn build_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: NodeId,
        rows: usize,
    ) -> Result<(NodeId, NodeId), crate::autodiff::AutodiffError> {
        match self.arch {
            GaussianArch::Linear => {
                let mu = tape.matmul(x, bound.node(self.segs.mean_w))?;
                let lv = tape.clamp(bound.node(self.segs.logvar_b), LOGVAR_MIN, LOGVAR_MAX);
                let lv = tape.broadcast_row(lv, rows)?;
                Ok((mu, lv))
            }
            GaussianArch::Mlp { .. } => {
                let mut h = x;
                for (w, b) in &self.segs.trunk {
                    let lin = tape.matmul(h, bound.node(*w))?;
                    let bias = tape.broadcast_row(bound.node(*b), rows)?;
                    let pre = tape.add(lin, bias)?;
                    h = tape.relu(pre);
                }
                let mw = tape.matmul(h, bound.node(self.segs.mean_w))?;
                let mb = tape.broadcast_row(bound.node(self.segs.mean_b.unwrap()), rows)?;
                let mu = tape.add(mw, mb)?;
                let vw = tape.matmul(h, bound.node(self.segs.logvar_w.unwrap()))?;
                let vb = tape.broadcast_row(bound.node(self.segs.logvar_b), rows)?;
                let lv_raw = tape.add(vw, vb)?;
                let lv = tape.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX);
                Ok((mu, lv))
            }
        }
    }

    /// Plain-f64 forward pass for one input. Kept consistent with
    /// `build_forward` by the tape/direct consistency test.
    pub fn mean_and_logvar(&self, x: &Vector) -> (Vector, Vector) {
        assert_eq!(x.dim(), self.input_dim, "input dimension");
        match self.arch {
            GaussianArch::Linear => {
                let w = self.params.slice(self.segs.mean_w);
                let mut mu = vec![0.0; self.output_dim];
                for i in 0..self.input_dim {
                    for j in 0..self.output_dim {
                        mu[j] += x[i] * w[i * self.output_dim + j];
                    }
                }
                let lv: Vec<f64> = self
                    .params
                    .slice(self.segs.logvar_b)
                    .iter()
                    .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
                    .collect();
                (Vector::new(mu), Vector::new(lv))
            }
            GaussianArch::Mlp { .. } => {
                let mut h: Vec<f64> = x.data().to_vec();
                for (wid, bid) in &self.segs.trunk {
                    let seg = self.params.segment(*wid).clone();
                    let w = self.params.slice(*wid);
                    let b = self.params.slice(*bid);
                    let mut next = vec![0.0; seg.cols];
                    for i in 0..seg.rows {
                        for j in 0..seg.cols {
                            next[j] += h[i] * w[i * seg.cols + j];
                        }
                    }
                    for j in 0..seg.cols {
                        next[j] = (next[j] + b[j]).max(0.0);
                    }
                    h = next;
                }
                let head = |wid: SegmentId, bid: SegmentId| -> Vec<f64> {
                    let seg = self.params.segment(wid).clone();
                    let w = self.params.slice(wid);
                    let b = self.params.slice(bid);
                    let mut out = b.to_vec();
                    for i in 0..seg.rows {
                        for j in 0..seg.cols {
                            out[j] += h[i] * w[i * seg.cols + j];
                        }
                    }
                    out
                };
                let mu = head(self.segs.mean_w, self.segs.mean_b.unwrap());
                let lv: Vec<f64> = head(self.segs.logvar_w.unwrap(), self.segs.logvar_b)
                    .into_iter()
                    .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
                    .collect();
                (Vector::new(mu), Vector::new(lv))
            }
        }
    }

    /// Reparameterized draw μ + σ⊙z with an injected standard-normal z.
    pub fn sample_with_noise(&self, x: &Vector, z: &Vector) -> Sample {
        assert_eq!(z.dim(), self.output_dim);
        let (mu, lv) = self.mean_and_logvar(x);
        let mut value = Vector::zeros(self.output_dim);
        for j in 0..self.output_dim {
            value[j] = mu[j] + (0.5 * lv[j]).exp() * z[j];
        }
        let log_prob = self.log_prob(x, &value);
        Sample { value: SampleValue::Continuous(value), log_prob, noise: Some(z.clone()) }
    }

    pub fn sample(&self, x: &Vector, rng: &mut RngStream) -> Sample {
        let z = Vector::new((0..self.output_dim).map(|_| rng.normal()).collect());
        self.sample_with_noise(x, &z)
    }

    /// log N(y; μ_θ(x), diag σ²_θ(x)) in nats.
    pub fn log_prob(&self, x: &Vector, y: &Vector) -> f64 {
        assert_eq!(y.dim(), self.output_dim);
        let (mu, lv) = self.mean_and_logvar(x);
        let mut acc = 0.0;
        for j in 0..self.output_dim {
            let d = y[j] - mu[j];
            acc += d * d * (-lv[j]).exp() + lv[j] + LOG_TAU;
        }
        -0.5 * acc
    }

    /// Differential entropy ½ Σ_j log(2πe σ_j²(x)).
    pub fn entropy(&self, x: &Vector) -> f64 {
        let (_, lv) = self.mean_and_logvar(x);
        0.5 * lv.data().iter().map(|v| v + 1.0 + LOG_TAU).sum::<f64>()
    }
}

/// Multiclass logistic-regression policy with softmax sampling.
#[derive(Debug, Clone)]
pub struct CategoricalPolicy {
    feature_dim: usize,
    classes: usize,
    params: ParamVector,
    w: SegmentId,
    b: SegmentId,
}

impl CategoricalPolicy {
    pub fn new(feature_dim: usize, classes: usize, rng: &mut RngStream) -> Self {
        let mut params = ParamVector::new();
        let w = params.push_segment(
            "logits_w",
            feature_dim,
            classes,
            uniform_init(rng, feature_dim, feature_dim * classes),
        );
        let b = params.push_segment("logits_b", 1, classes, vec![0.0; classes]);
        Self { feature_dim, classes, params, w, b }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn build_logits<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: NodeId,
        rows: usize,
    ) -> Result<NodeId, crate::autodiff::AutodiffError> {
        let lin = tape.matmul(x, bound.node(self.w))?;
        let bias = tape.broadcast_row(bound.node(self.b), rows)?;
        tape.add(lin, bias)
    }

    pub fn logits(&self, x: &Vector) -> Vec<f64> {
        assert_eq!(x.dim(), self.feature_dim);
        let w = self.params.slice(self.w);
        let b = self.params.slice(self.b);
        let mut out = b.to_vec();
        for i in 0..self.feature_dim {
            for k in 0..self.classes {
                out[k] += x[i] * w[i * self.classes + k];
            }
        }
        out
    }

    pub fn log_softmax(&self, x: &Vector) -> Vec<f64> {
        let logits = self.logits(x);
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        logits.iter().map(|v| v - lse).collect()
    }

    pub fn probs(&self, x: &Vector) -> Vec<f64> {
        self.log_softmax(x).iter().map(|v| v.exp()).collect()
    }

    /// Draws a class from the softmax distribution by inverse CDF.
    pub fn sample(&self, x: &Vector, rng: &mut RngStream) -> Sample {
        let log_probs = self.log_softmax(x);
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut class = self.classes - 1;
        for (k, lp) in log_probs.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                class = k;
                break;
            }
        }
        Sample { value: SampleValue::Class(class), log_prob: log_probs[class], noise: None }
    }

    /// Shannon entropy −Σ_k π_k log π_k via stable log-softmax.
    pub fn entropy(&self, x: &Vector) -> f64 {
        self.log_softmax(x).iter().map(|lp| -lp.exp() * lp).sum()
    }
}

/// One draw from a policy, carrying everything needed to re-derive gradients.
#[derive(Debug, Clone)]
pub struct Sample {
    pub value: SampleValue,
    pub log_prob: f64,
    /// The standard-normal draw behind a reparameterized sample.
    pub noise: Option<Vector>,
}

#[derive(Debug, Clone)]
pub enum SampleValue {
    Continuous(Vector),
    Class(usize),
}

impl SampleValue {
    pub fn as_vector(&self) -> &Vector {
        match self {
            SampleValue::Continuous(v) => v,
            SampleValue::Class(_) => panic!("expected a continuous sample"),
        }
    }

    pub fn as_class(&self) -> usize {
        match self {
            SampleValue::Class(k) => *k,
            SampleValue::Continuous(_) => panic!("expected a class sample"),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: u32 LE header length, JSON header, f64 LE payload.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    kind: String,
    input_dim: usize,
    output_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    arch: Option<GaussianArch>,
    segments: Vec<SegmentMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentMeta {
    name: String,
    rows: usize,
    cols: usize,
}

fn write_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    values: &[f64],
) -> Result<(), ModelError> {
    let json = serde_json::to_vec(header)
        .map_err(|e| ModelError::BadCheckpoint(format!("header encode: {e}")))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(json.len() as u32).to_le_bytes())?;
    file.write_all(&json)?;
    for v in values {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>), ModelError> {
    let mut file = std::fs::File::open(path)?;
    let mut len_buf = [0u8; 4];
    file.read_exact(&mut len_buf)?;
    let header_len = u32::from_le_bytes(len_buf) as usize;
    let mut json = vec![0u8; header_len];
    file.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)
        .map_err(|e| ModelError::BadCheckpoint(format!("header decode: {e}")))?;
    if header.format != "nllpo-policy" {
        return Err(ModelError::BadCheckpoint(format!("unknown format {:?}", header.format)));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(ModelError::BadCheckpoint("payload not a multiple of 8 bytes".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expect: usize = header.segments.iter().map(|s| s.rows * s.cols).sum();
    if values.len() != expect {
        return Err(ModelError::BadCheckpoint(format!(
            "payload has {} values, segments describe {expect}",
            values.len()
        )));
    }
    Ok((header, values))
}

fn segment_meta(pv: &ParamVector) -> Vec<SegmentMeta> {
    pv.segments()
        .iter()
        .map(|s| SegmentMeta { name: s.name.clone(), rows: s.rows, cols: s.cols })
        .collect()
}

impl GaussianPolicy {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            format: "nllpo-policy".into(),
            version: 1,
            kind: "gaussian".into(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            arch: Some(self.arch.clone()),
            segments: segment_meta(&self.params),
        };
        write_checkpoint(path.as_ref(), &header, self.params.values())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let (header, values) = read_checkpoint(path.as_ref())?;
        if header.kind != "gaussian" {
            return Err(ModelError::BadCheckpoint(format!(
                "expected gaussian, got {}",
                header.kind
            )));
        }
        let arch = header
            .arch
            .ok_or_else(|| ModelError::BadCheckpoint("missing gaussian arch".into()))?;
        let mut rng = RngStream::seed(0); // init values are overwritten below
        let mut policy = match &arch {
            GaussianArch::Linear => Self::linear(header.input_dim, header.output_dim, &mut rng),
            GaussianArch::Mlp { hidden } => {
                Self::mlp(header.input_dim, header.output_dim, hidden, &mut rng)
            }
        };
        policy
            .params
            .set_values(&values)
            .map_err(|_| ModelError::BadCheckpoint("parameter count mismatch".into()))?;
        Ok(policy)
    }
}

impl CategoricalPolicy {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            format: "nllpo-policy".into(),
            version: 1,
            kind: "categorical".into(),
            input_dim: self.feature_dim,
            output_dim: self.classes,
            arch: None,
            segments: segment_meta(&self.params),
        };
        write_checkpoint(path.as_ref(), &header, self.params.values())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let (header, values) = read_checkpoint(path.as_ref())?;
        if header.kind != "categorical" {
            return Err(ModelError::BadCheckpoint(format!(
                "expected categorical, got {}",
                header.kind
            )));
        }
        let mut rng = RngStream::seed(0);
        let mut policy = Self::new(header.input_dim, header.output_dim, &mut rng);
        policy
            .params
            .set_values(&values)
            .map_err(|_| ModelError::BadCheckpoint("parameter count mismatch".into()))?;
        Ok(policy)
    }
}

/// Runs a policy forward pass through the tape with plain f64 and returns
/// (μ, logvar) values; lets tests pin tape/direct consistency.
pub fn tape_forward_values(policy: &GaussianPolicy, x: &Vector) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let bound = bind(&mut tape, policy.params(), None);
    let xn = tape.constant(1, x.dim(), x.data());
    let (mu, lv) = policy.build_forward(&mut tape, &bound, xn, 1).unwrap();
    (tape.value(mu).values(), tape.value(lv).values())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_x(dim: usize, seed: u64) -> Vector {
        let mut rng = RngStream::seed(seed);
        Vector::new((0..dim).map(|_| rng.uniform_range(-2.0, 2.0)).collect())
    }

    #[test]
    fn truth_sample_degenerate_noise() {
        let lambda = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.5, 2.0]]);
        let truth = LinearGaussianTruth::new(lambda, SpdMatrix::from_diag(&[1e-12, 1e-12]));
        let mut rng = RngStream::seed(3);
        let x = Vector::new(vec![1.0, -1.0]);
        let y = truth.sample(&x, &mut rng);
        let mean = truth.mean(&x);
        assert!(y.sub(&mean).norm() < 1e-5);
    }

    #[test]
    fn truth_sample_zero_mean_statistics() {
        let truth = LinearGaussianTruth::new(Matrix::zeros(2, 2), SpdMatrix::identity(2));
        let mut rng = RngStream::seed(4);
        let x = Vector::new(vec![1.0, 1.0]);
        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let y = truth.sample(&x, &mut rng);
            sums[0] += y[0];
            sums[1] += y[1];
        }
        for s in sums {
            assert!((s / n as f64).abs() < 0.02);
        }
    }

    #[test]
    fn truth_sample_deterministic_by_seed() {
        let lambda = Matrix::from_rows(&[vec![0.3, -1.2]]);
        let truth = LinearGaussianTruth::new(lambda, SpdMatrix::from_diag(&[0.5]));
        let x = Vector::new(vec![2.0, 1.0]);
        let a = truth.sample(&x, &mut RngStream::seed(9));
        let b = truth.sample(&x, &mut RngStream::seed(9));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn sample_with_zero_noise_is_the_mean() {
        let mut rng = RngStream::seed(5);
        let policy = GaussianPolicy::mlp(3, 2, &[8, 8], &mut rng);
        let x = probe_x(3, 50);
        let s = policy.sample_with_noise(&x, &Vector::zeros(2));
        let (mu, _) = policy.mean_and_logvar(&x);
        assert_eq!(s.value.as_vector().data(), mu.data());
    }

    #[test]
    fn constant_policy_sample_variance() {
        let mut rng = RngStream::seed(6);
        let mut policy = GaussianPolicy::linear(1, 2, &mut rng);
        policy.set_mean_matrix(&Matrix::zeros(2, 1));
        policy.set_logvar(&[0.0, 0.0]);
        let x = Vector::new(vec![0.0]);
        let n = 100_000;
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let s = policy.sample(&x, &mut rng);
            let v = s.value.as_vector();
            sq[0] += v[0] * v[0];
            sq[1] += v[1] * v[1];
        }
        for s in sq {
            let var = s / n as f64;
            assert!((var - 1.0).abs() < 0.05, "variance {var}");
        }
    }

    #[test]
    fn sample_log_prob_self_consistent() {
        let mut rng = RngStream::seed(7);
        let policy = GaussianPolicy::mlp(2, 3, &[8], &mut rng);
        let x = probe_x(2, 70);
        let s = policy.sample(&x, &mut rng);
        let lp = policy.log_prob(&x, s.value.as_vector());
        assert_eq!(s.log_prob, lp);
    }

    #[test]
    fn log_prob_reference_values() {
        let mut rng = RngStream::seed(8);
        let mut policy = GaussianPolicy::linear(1, 1, &mut rng);
        policy.set_mean_matrix(&Matrix::zeros(1, 1));
        policy.set_logvar(&[0.0]);
        let x = Vector::new(vec![0.0]);
        let lp = policy.log_prob(&x, &Vector::new(vec![0.0]));
        assert!((lp - (-0.9189385332046727)).abs() < 1e-12);

        let mut policy2 = GaussianPolicy::linear(1, 2, &mut rng);
        policy2.set_mean_matrix(&Matrix::zeros(2, 1));
        policy2.set_logvar(&[0.0, 0.0]);
        let lp2 = policy2.log_prob(&x, &Vector::zeros(2));
        assert!((lp2 - (-1.8378770664093453)).abs() < 1e-12);
    }

    #[test]
    fn log_prob_translation_invariant() {
        let mut rng = RngStream::seed(9);
        let mut policy = GaussianPolicy::linear(1, 2, &mut rng);
        policy.set_logvar(&[0.3, -0.7]);
        let x = Vector::new(vec![1.0]);
        let y = Vector::new(vec![0.5, -0.2]);
        let base = policy.log_prob(&x, &y);

        // shift both the mean map and the target by the same vector
        let shift = Vector::new(vec![2.5, -1.0]);
        let a = policy.mean_matrix();
        let shifted = Matrix::from_fn(2, 1, |i, j| a.get(i, j) + shift[i]);
        policy.set_mean_matrix(&shifted);
        let moved = policy.log_prob(&x, &y.add(&shift));
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn entropy_reference_values() {
        let mut rng = RngStream::seed(10);
        let mut p1 = GaussianPolicy::linear(1, 1, &mut rng);
        p1.set_logvar(&[0.0]);
        let x = Vector::new(vec![0.0]);
        assert!((p1.entropy(&x) - 1.4189385332046727).abs() < 1e-12);

        // σ² ×4 adds log 2 per dimension
        let mut p_scaled = p1.clone();
        p_scaled.set_logvar(&[4.0_f64.ln()]);
        assert!((p_scaled.entropy(&x) - p1.entropy(&x) - 2.0_f64.ln()).abs() < 1e-12);

        let mut p2 = GaussianPolicy::linear(1, 2, &mut rng);
        p2.set_logvar(&[0.0, 0.0]);
        assert!((p2.entropy(&x) - 2.8378770664093453).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_sampled_neg_log_prob() {
        let mut rng = RngStream::seed(11);
        let policy = GaussianPolicy::mlp(2, 2, &[8], &mut rng);
        let x = probe_x(2, 110);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let s = policy.sample(&x, &mut rng);
            sum += -s.log_prob;
            sumsq += s.log_prob * s.log_prob;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        let h = policy.entropy(&x);
        assert!((mean - h).abs() < 3.0 * se + 1e-9, "mean {mean} entropy {h} se {se}");
    }

    #[test]
    fn log_prob_integrates_to_one() {
        let mut rng = RngStream::seed(12);
        let mut policy = GaussianPolicy::linear(1, 1, &mut rng);
        policy.set_mean_matrix(&Matrix::from_rows(&[vec![0.7]]));
        policy.set_logvar(&[0.42]);
        let x = Vector::new(vec![1.3]);
        let (mu, lv) = policy.mean_and_logvar(&x);
        let sigma = (0.5 * lv[0]).exp();
        let (lo, hi) = (mu[0] - 8.0 * sigma, mu[0] + 8.0 * sigma);
        let steps = 20_000;
        let dx = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..=steps {
            let y = Vector::new(vec![lo + i as f64 * dx]);
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            integral += w * policy.log_prob(&x, &y).exp() * dx;
        }
        assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    }

    #[test]
    fn tape_forward_matches_direct_eval() {
        let mut rng = RngStream::seed(13);
        for policy in [
            GaussianPolicy::linear(3, 2, &mut rng),
            GaussianPolicy::mlp(3, 2, &[8, 8], &mut rng),
        ] {
            let x = probe_x(3, 130);
            let (mu_t, lv_t) = tape_forward_values(&policy, &x);
            let (mu_d, lv_d) = policy.mean_and_logvar(&x);
            for j in 0..2 {
                assert!((mu_t[j] - mu_d[j]).abs() < 1e-14);
                assert!((lv_t[j] - lv_d[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn categorical_near_deterministic() {
        let mut rng = RngStream::seed(14);
        let mut policy = CategoricalPolicy::new(1, 3, &mut rng);
        // force logits (+30, -30, -30) regardless of x
        policy.params_mut().set_values(&[0.0, 0.0, 0.0, 30.0, -30.0, -30.0]).unwrap();
        let x = Vector::new(vec![0.0]);
        for _ in 0..10_000 {
            assert_eq!(policy.sample(&x, &mut rng).value.as_class(), 0);
        }
        assert!(policy.entropy(&x) < 1e-6);
    }

    #[test]
    fn categorical_uniform_frequencies() {
        let mut rng = RngStream::seed(15);
        let mut policy = CategoricalPolicy::new(1, 4, &mut rng);
        policy.params_mut().set_values(&[0.0; 8]).unwrap();
        let x = Vector::new(vec![0.0]);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[policy.sample(&x, &mut rng).value.as_class()] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.02, "freq {freq}");
        }
        assert!((policy.entropy(&x) - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn categorical_log_probs_normalize() {
        let mut rng = RngStream::seed(16);
        let policy = CategoricalPolicy::new(3, 5, &mut rng);
        let x = probe_x(3, 160);
        let total: f64 = policy.log_softmax(&x).iter().map(|lp| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(policy.entropy(&x) <= (5.0_f64).ln() + 1e-12);
        assert!(policy.probs(&x).iter().all(|p| *p > 0.0));
    }

    #[test]
    fn gaussian_checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join("nllpo_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gaussian.ckpt");
        let mut rng = RngStream::seed(17);
        let policy = GaussianPolicy::mlp(3, 2, &[8, 4], &mut rng);
        policy.save(&path).unwrap();
        let loaded = GaussianPolicy::load(&path).unwrap();
        assert_eq!(loaded.params().values(), policy.params().values());
        assert_eq!(loaded.arch(), policy.arch());
        let x = probe_x(3, 170);
        assert_eq!(
            loaded.log_prob(&x, &Vector::zeros(2)),
            policy.log_prob(&x, &Vector::zeros(2))
        );
    }

    #[test]
    fn categorical_checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join("nllpo_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("categorical.ckpt");
        let mut rng = RngStream::seed(18);
        let policy = CategoricalPolicy::new(4, 3, &mut rng);
        policy.save(&path).unwrap();
        let loaded = CategoricalPolicy::load(&path).unwrap();
        assert_eq!(loaded.params().values(), policy.params().values());
    }
}
