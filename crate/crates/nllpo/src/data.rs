//! Datasets: paired (x, y) records with deterministic seeded splits,
//! synthetic generators, and CSV ingestion.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::linalg::{Matrix, SpdMatrix, Vector};
use crate::models::LinearGaussianTruth;
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column {col:?}")]
    NonNumericCell { row: usize, col: String },
    #[error("empty file {0:?}")]
    EmptyFile(String),
    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Regression targets or class indices.
#[derive(Debug, Clone)]
pub enum Targets {
    Continuous(Matrix),
    Classes { labels: Vec<usize>, k: usize },
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
    pub split: Split,
    pub provenance: Provenance,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
}

const SPLIT_STREAM: u64 = 11;

/// Deterministic shuffled 80/10/10 split.
fn make_split(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::substream(seed, SPLIT_STREAM);
    rng.shuffle(&mut idx);
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..(n_train + n_val).min(n)].to_vec();
    let test = idx[(n_train + n_val).min(n)..].to_vec();
    Split { train, val, test }
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.inputs.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Output dimension: n for regression, K for classification.
    pub fn target_dim(&self) -> usize {
        match &self.targets {
            Targets::Continuous(m) => m.cols(),
            Targets::Classes { k, .. } => *k,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.targets, Targets::Classes { .. })
    }

    pub fn inputs_rows(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(idx.len(), self.input_dim(), |i, j| self.inputs.get(idx[i], j))
    }

    /// Continuous targets for the given rows; classification targets come out
    /// one-hot encoded.
    pub fn targets_rows(&self, idx: &[usize]) -> Matrix {
        match &self.targets {
            Targets::Continuous(m) => {
                Matrix::from_fn(idx.len(), m.cols(), |i, j| m.get(idx[i], j))
            }
            Targets::Classes { labels, k } => {
                let mut out = Matrix::zeros(idx.len(), *k);
                for (i, r) in idx.iter().enumerate() {
                    out.set(i, labels[*r], 1.0);
                }
                out
            }
        }
    }

    pub fn labels_rows(&self, idx: &[usize]) -> Vec<usize> {
        match &self.targets {
            Targets::Classes { labels, .. } => idx.iter().map(|r| labels[*r]).collect(),
            Targets::Continuous(_) => panic!("continuous targets have no labels"),
        }
    }

    /// Writes the dataset back out as CSV (features then targets).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut file = std::fs::File::create(path)?;
        let header: Vec<String> =
            self.feature_names.iter().chain(self.target_names.iter()).cloned().collect();
        writeln!(file, "{}", header.join(","))?;
        for i in 0..self.rows() {
            let mut cells: Vec<String> =
                (0..self.input_dim()).map(|j| format!("{}", self.inputs.get(i, j))).collect();
            match &self.targets {
                Targets::Continuous(m) => {
                    cells.extend((0..m.cols()).map(|j| format!("{}", m.get(i, j))));
                }
                Targets::Classes { labels, .. } => cells.push(format!("{}", labels[i])),
            }
            writeln!(file, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Synthetic linear-Gaussian data: x ~ U([−5,5]^m), y ~ N(Λx, β²I), with Λ
/// drawn once per seed from U([−1,1]).
pub fn generate_synthetic(
    n: usize,
    m: usize,
    rows: usize,
    beta: f64,
    seed: u64,
) -> (Dataset, LinearGaussianTruth) {
    assert!(n > 0 && m > 0 && rows > 0 && beta > 0.0);
    let mut lambda_rng = RngStream::substream(seed, 1);
    let lambda = Matrix::from_fn(n, m, |_, _| lambda_rng.uniform_range(-1.0, 1.0));
    let sigma = SpdMatrix::from_diag(&vec![beta * beta; n]);
    let truth = LinearGaussianTruth::new(lambda, sigma);

    let mut x_rng = RngStream::substream(seed, 2);
    let inputs = Matrix::from_fn(rows, m, |_, _| x_rng.uniform_range(-5.0, 5.0));
    let mut y_rng = RngStream::substream(seed, 3);
    let mut targets = Matrix::zeros(rows, n);
    for i in 0..rows {
        let x = Vector::new(inputs.row(i).to_vec());
        let y = truth.sample(&x, &mut y_rng);
        for j in 0..n {
            targets.set(i, j, y[j]);
        }
    }
    let dataset = Dataset {
        inputs,
        targets: Targets::Continuous(targets),
        split: make_split(rows, seed),
        provenance: Provenance { source: format!("synthetic(n={n},m={m},beta={beta})"), seed },
        feature_names: (0..m).map(|j| format!("x{j}")).collect(),
        target_names: (0..n).map(|j| format!("y{j}")).collect(),
    };
    (dataset, truth)
}

/// Synthetic dynamics-style regression: inputs are (state, action) pairs and
/// targets are noisy nonlinear next-state deltas. Stands in for offline
/// transition datasets without any external dependency.
pub fn generate_dynamics(
    state_dim: usize,
    action_dim: usize,
    rows: usize,
    noise: f64,
    seed: u64,
) -> Dataset {
    assert!(state_dim > 0 && rows > 0 && noise > 0.0);
    let m = state_dim + action_dim;
    let mut w_rng = RngStream::substream(seed, 4);
    let w1 = Matrix::from_fn(state_dim, m, |_, _| w_rng.uniform_range(-1.0, 1.0));
    let w2 = Matrix::from_fn(state_dim, m, |_, _| w_rng.uniform_range(-0.5, 0.5));

    let mut x_rng = RngStream::substream(seed, 5);
    let inputs = Matrix::from_fn(rows, m, |_, _| x_rng.uniform_range(-2.0, 2.0));
    let mut y_rng = RngStream::substream(seed, 6);
    let mut targets = Matrix::zeros(rows, state_dim);
    for i in 0..rows {
        let x = Vector::new(inputs.row(i).to_vec());
        let h1 = w1.mat_vec(&x).unwrap();
        let h2 = w2.mat_vec(&x).unwrap();
        for j in 0..state_dim {
            let delta = h1[j].tanh() + 0.3 * (2.0 * h2[j]).sin();
            targets.set(i, j, delta + noise * y_rng.normal());
        }
    }
    Dataset {
        inputs,
        targets: Targets::Continuous(targets),
        split: make_split(rows, seed),
        provenance: Provenance {
            source: format!("dynamics(state={state_dim},action={action_dim},noise={noise})"),
            seed,
        },
        feature_names: (0..m).map(|j| format!("x{j}")).collect(),
        target_names: (0..state_dim).map(|j| format!("dy{j}")).collect(),
    }
}

/// Bundled classification generator: Gaussian blobs with a geometric class
/// imbalance, separable enough that reward choice decides the margin.
pub fn generate_classification(
    features: usize,
    classes: usize,
    rows: usize,
    separation: f64,
    imbalance: f64,
    seed: u64,
) -> Dataset {
    assert!(features > 0 && classes >= 2 && rows > 0);
    assert!(imbalance > 0.0 && imbalance <= 1.0, "imbalance is a geometric ratio in (0,1]");
    let mut c_rng = RngStream::substream(seed, 7);
    let centers = Matrix::from_fn(classes, features, |_, _| separation * c_rng.normal());

    // geometric priors p_k ∝ imbalance^k
    let mut priors = vec![0.0; classes];
    let mut total = 0.0;
    for (k, p) in priors.iter_mut().enumerate() {
        *p = imbalance.powi(k as i32);
        total += *p;
    }
    for p in priors.iter_mut() {
        *p /= total;
    }

    let mut rng = RngStream::substream(seed, 8);
    let mut labels = Vec::with_capacity(rows);
    let mut inputs = Matrix::zeros(rows, features);
    for i in 0..rows {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut label = classes - 1;
        for (k, p) in priors.iter().enumerate() {
            acc += p;
            if u < acc {
                label = k;
                break;
            }
        }
        labels.push(label);
        for j in 0..features {
            inputs.set(i, j, centers.get(label, j) + rng.normal());
        }
    }
    Dataset {
        inputs,
        targets: Targets::Classes { labels, k: classes },
        split: make_split(rows, seed),
        provenance: Provenance {
            source: format!(
                "blobs(features={features},classes={classes},sep={separation},imb={imbalance})"
            ),
            seed,
        },
        feature_names: (0..features).map(|j| format!("x{j}")).collect(),
        target_names: vec!["label".into()],
    }
}

/// What to read from a CSV file.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub target: CsvTarget,
    /// Standardize features to train-split mean/std (std floored at 1e-12).
    pub standardize: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum CsvTarget {
    Regression(Vec<String>),
    Classification(String),
}

/// Loads a CSV with a header row, `.` decimal separator, UTF-8.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::EmptyFile(path.display().to_string()))?;
    let header: Vec<&str> = header_line.split(',').map(|h| h.trim()).collect();
    let col_index = |name: &str| -> Result<usize, DataError> {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let feature_cols: Vec<usize> = schema
        .features
        .iter()
        .map(|f| col_index(f))
        .collect::<Result<_, _>>()?;
    let target_cols: Vec<usize> = match &schema.target {
        CsvTarget::Regression(names) => {
            names.iter().map(|t| col_index(t)).collect::<Result<_, _>>()?
        }
        CsvTarget::Classification(name) => vec![col_index(name)?],
    };

    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').map(|c| c.trim()).collect()).collect();
    if rows.is_empty() {
        return Err(DataError::EmptyFile(path.display().to_string()));
    }
    let n = rows.len();

    let parse_cell = |row: usize, col: usize| -> Result<f64, DataError> {
        let cells: &Vec<&str> = &rows[row];
        let raw = cells.get(col).copied().unwrap_or("");
        raw.parse::<f64>().map_err(|_| DataError::NonNumericCell {
            row,
            col: header.get(col).map(|h| h.to_string()).unwrap_or_else(|| format!("#{col}")),
        })
    };

    let mut inputs = Matrix::zeros(n, feature_cols.len());
    for (j, col) in feature_cols.iter().enumerate() {
        for i in 0..n {
            inputs.set(i, j, parse_cell(i, *col)?);
        }
    }

    let targets = match &schema.target {
        CsvTarget::Regression(_) => {
            let mut t = Matrix::zeros(n, target_cols.len());
            for (j, col) in target_cols.iter().enumerate() {
                for i in 0..n {
                    t.set(i, j, parse_cell(i, *col)?);
                }
            }
            Targets::Continuous(t)
        }
        CsvTarget::Classification(name) => {
            // labels may be arbitrary strings; map to contiguous ids in
            // sorted order for determinism
            let col = target_cols[0];
            let mut seen: BTreeMap<String, usize> = BTreeMap::new();
            let raw: Vec<String> = (0..n)
                .map(|i| {
                    rows[i]
                        .get(col)
                        .copied()
                        .map(|s| s.to_string())
                        .ok_or_else(|| DataError::MissingColumn(name.clone()))
                })
                .collect::<Result<_, _>>()?;
            for label in &raw {
                let next = seen.len();
                seen.entry(label.clone()).or_insert(next);
            }
            // re-number in sorted key order
            for (rank, (_, v)) in seen.iter_mut().enumerate() {
                *v = rank;
            }
            let labels: Vec<usize> = raw.iter().map(|l| seen[l]).collect();
            Targets::Classes { labels, k: seen.len() }
        }
    };

    let split = make_split(n, schema.seed);
    let mut dataset = Dataset {
        inputs,
        targets,
        split,
        provenance: Provenance { source: path.display().to_string(), seed: schema.seed },
        feature_names: schema.features.clone(),
        target_names: match &schema.target {
            CsvTarget::Regression(names) => names.clone(),
            CsvTarget::Classification(name) => vec![name.clone()],
        },
    };
    if schema.standardize {
        standardize_features(&mut dataset);
    }
    Ok(dataset)
}

/// Standardizes features in place to train-split mean and std.
fn standardize_features(dataset: &mut Dataset) {
    let train = dataset.split.train.clone();
    if train.is_empty() {
        return;
    }
    let m = dataset.input_dim();
    for j in 0..m {
        let mean: f64 =
            train.iter().map(|i| dataset.inputs.get(*i, j)).sum::<f64>() / train.len() as f64;
        let var: f64 = train
            .iter()
            .map(|i| {
                let d = dataset.inputs.get(*i, j) - mean;
                d * d
            })
            .sum::<f64>()
            / train.len() as f64;
        let std = var.sqrt().max(1e-12);
        for i in 0..dataset.rows() {
            let v = (dataset.inputs.get(i, j) - mean) / std;
            dataset.inputs.set(i, j, v);
        }
    }
}

/// Unbiased sample covariance of matrix rows.
pub fn sample_covariance(rows: &Matrix) -> Result<Matrix, DataError> {
    let n = rows.rows();
    if n < 2 {
        return Err(DataError::TooFewSamples { need: 2, got: n });
    }
    let d = rows.cols();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += rows.get(i, j);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            let da = rows.get(i, a) - mean[a];
            for b in 0..d {
                let db = rows.get(i, b) - mean[b];
                cov.set(a, b, cov.get(a, b) + da * db);
            }
        }
    }
    Ok(cov.scale(1.0 / (n - 1) as f64))
}
