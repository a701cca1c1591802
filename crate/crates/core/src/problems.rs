//! Synthetic composite problems split over workers.
//!
//! Each worker `i` owns a local dataset and loss `f_i`; the global smooth
//! part is `f = (1/n) sum_i f_i` and the regularizer `r` is shared.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::proxops::{Composite, ProxError, Regularizer};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Regularizer(#[from] ProxError),
    #[error("dataset {path}: {message}")]
    Dataset { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    LeastSquares,
    Logistic,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::LeastSquares => "least-squares",
            LossKind::Logistic => "logistic",
        })
    }
}

/// Mini-batch size for the stochastic oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Batch {
    /// Exact local gradient (no sampling noise).
    Full,
    /// `b >= 1` examples drawn uniformly with replacement.
    Size(usize),
}

impl fmt::Display for Batch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Batch::Full => f.write_str("full"),
            Batch::Size(b) => write!(f, "{b}"),
        }
    }
}

impl Serialize for Batch {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Batch::Full => s.serialize_str("full"),
            Batch::Size(b) => s.serialize_u64(*b as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Batch {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(serde::de::Error::custom("batch size must be >= 1")),
            Raw::Num(b) => Ok(Batch::Size(b as usize)),
            Raw::Text(t) if t == "full" => Ok(Batch::Full),
            Raw::Text(t) => t
                .parse::<usize>()
                .ok()
                .filter(|&b| b >= 1)
                .map(Batch::Size)
                .ok_or_else(|| serde::de::Error::custom(format!("batch must be \"full\" or a size >= 1, got `{t}`"))),
        }
    }
}

/// Recipe for a synthetic heterogeneous problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub loss: LossKind,
    pub d: usize,
    pub workers: usize,
    pub per_worker: usize,
    /// Least-squares: shift of worker `i`'s ground truth along `e_{i mod d}`.
    /// Logistic: scale of the per-worker cluster centers.
    #[serde(default)]
    pub skew_delta: f64,
    /// Std of additive target noise (least-squares only).
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_reg")]
    pub reg: Regularizer,
    #[serde(default)]
    pub seed: u64,
}

fn default_reg() -> Regularizer {
    Regularizer::Zero
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerData {
    /// `m x d` design, one example per row.
    pub features: Array2<f64>,
    /// Real targets (least-squares) or 0/1 labels (logistic).
    pub targets: Array1<f64>,
}

impl WorkerData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GradSample {
    pub worker: usize,
    pub indices: Vec<usize>,
    pub grad: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct CompositeProblem {
    loss: LossKind,
    d: usize,
    workers: Vec<WorkerData>,
    reg: Regularizer,
    smoothness: f64,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn lambda_max_gram(features: &Array2<f64>) -> f64 {
    let (m, d) = features.dim();
    let gram = features.t().dot(features) / m as f64;
    let mat = DMatrix::from_fn(d, d, |i, j| gram[[i, j]]);
    nalgebra::SymmetricEigen::new(mat).eigenvalues.iter().copied().fold(0.0, f64::max)
}

impl CompositeProblem {
    /// Assemble from explicit per-worker data; `L` is computed from it.
    /// All-zero features give `f = 0` and `L = 0`, which is allowed.
    pub fn new(loss: LossKind, workers: Vec<WorkerData>, reg: Regularizer) -> Result<Self, ProblemError> {
        let d = workers.first().map(|w| w.features.ncols()).ok_or_else(|| ProblemError::Invalid("no workers".into()))?;
        if d == 0 {
            return Err(ProblemError::Invalid("dimension must be >= 1".into()));
        }
        for (i, w) in workers.iter().enumerate() {
            if w.features.ncols() != d || w.features.nrows() != w.targets.len() {
                return Err(ProblemError::Invalid(format!("worker {i} data has inconsistent shape")));
            }
            if w.is_empty() {
                return Err(ProblemError::Invalid(format!("worker {i} has no examples")));
            }
            if loss == LossKind::Logistic && w.targets.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(ProblemError::Invalid(format!("worker {i} has a logistic label outside {{0, 1}}")));
            }
        }
        reg.validate(d)?;
        let scale = match loss {
            LossKind::LeastSquares => 1.0,
            LossKind::Logistic => 0.25,
        };
        let smoothness = workers.iter().map(|w| scale * lambda_max_gram(&w.features)).fold(0.0, f64::max);
        if !smoothness.is_finite() {
            return Err(ProblemError::Invalid("data give a non-finite smoothness constant".into()));
        }
        Ok(Self { loss, d, workers, reg, smoothness })
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn worker_data(&self, worker: usize) -> &WorkerData {
        &self.workers[worker]
    }

    pub fn with_regularizer(mut self, reg: Regularizer) -> Result<Self, ProblemError> {
        reg.validate(self.d)?;
        self.reg = reg;
        Ok(self)
    }

    fn example_residual(&self, a: ArrayView1<f64>, target: f64, x: ArrayView1<f64>) -> f64 {
        let z = a.dot(&x);
        match self.loss {
            LossKind::LeastSquares => z - target,
            LossKind::Logistic => sigmoid(z) - target,
        }
    }

    fn example_loss(&self, a: ArrayView1<f64>, target: f64, x: ArrayView1<f64>) -> f64 {
        let z = a.dot(&x);
        match self.loss {
            LossKind::LeastSquares => 0.5 * (z - target) * (z - target),
            LossKind::Logistic => softplus(z) - target * z,
        }
    }

    /// `f_i(x)`
    pub fn local_value(&self, worker: usize, x: ArrayView1<f64>) -> f64 {
        let data = &self.workers[worker];
        let total: f64 = data
            .features
            .rows()
            .into_iter()
            .zip(&data.targets)
            .map(|(a, &t)| self.example_loss(a, t, x))
            .sum();
        total / data.len() as f64
    }

    /// Exact `grad f_i(x)`.
    pub fn full_grad(&self, worker: usize, x: ArrayView1<f64>) -> Array1<f64> {
        let data = &self.workers[worker];
        let z = data.features.dot(&x);
        let resid: Array1<f64> = match self.loss {
            LossKind::LeastSquares => &z - &data.targets,
            LossKind::Logistic => z.mapv(sigmoid) - &data.targets,
        };
        data.features.t().dot(&resid) / data.len() as f64
    }

    /// Mean per-example gradient over a with-replacement mini-batch drawn
    /// from `rng`; `Batch::Full` returns the exact gradient and draws nothing.
    pub fn stoch_grad<R: Rng + ?Sized>(&self, worker: usize, x: ArrayView1<f64>, batch: Batch, rng: &mut R) -> GradSample {
        let data = &self.workers[worker];
        match batch {
            Batch::Full => GradSample { worker, indices: (0..data.len()).collect(), grad: self.full_grad(worker, x) },
            Batch::Size(b) => {
                let indices: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
                let mut grad = Array1::zeros(self.d);
                for &j in &indices {
                    let a = data.features.row(j);
                    let r = self.example_residual(a, data.targets[j], x);
                    grad.scaled_add(r, &a);
                }
                grad /= b as f64;
                GradSample { worker, indices, grad }
            }
        }
    }

    /// `phi(x) = (1/n) sum_i f_i(x) + r(x)`
    pub fn objective(&self, x: ArrayView1<f64>) -> f64 {
        self.value(x)
    }

    /// SHA-256 over loss, regularizer and every data entry.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.loss.to_string().as_bytes());
        h.update((self.d as u64).to_le_bytes());
        h.update(format!("{:?}", self.reg).as_bytes());
        for w in &self.workers {
            h.update((w.len() as u64).to_le_bytes());
            for v in w.features.iter().chain(w.targets.iter()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Dump as CSV rows `worker, features..., target`.
    pub fn write_csv(&self, path: &Path) -> Result<(), ProblemError> {
        let err = |e: csv::Error| ProblemError::Dataset { path: path.display().to_string(), message: e.to_string() };
        let mut wtr = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["worker".to_string()];
        header.extend((0..self.d).map(|j| format!("x{j}")));
        header.push("target".into());
        wtr.write_record(&header).map_err(err)?;
        for (i, w) in self.workers.iter().enumerate() {
            for (row, t) in w.features.rows().into_iter().zip(&w.targets) {
                let mut rec = vec![i.to_string()];
                rec.extend(row.iter().map(|v| format!("{v:.16e}")));
                rec.push(format!("{t:.16e}"));
                wtr.write_record(&rec).map_err(err)?;
            }
        }
        wtr.flush().map_err(|e| ProblemError::Dataset { path: path.display().to_string(), message: e.to_string() })
    }

    /// Load a dataset written by [`write_csv`](Self::write_csv).
    pub fn read_csv(path: &Path, loss: LossKind, reg: Regularizer) -> Result<Self, ProblemError> {
        let fail = |message: String| ProblemError::Dataset { path: path.display().to_string(), message };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
        let d = rdr.headers().map_err(|e| fail(e.to_string()))?.len().checked_sub(2).filter(|&d| d > 0);
        let d = d.ok_or_else(|| fail("header needs worker, at least one feature, target".into()))?;
        let mut rows: Vec<Vec<(Vec<f64>, f64)>> = Vec::new();
        for (lineno, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| fail(e.to_string()))?;
            let bad = |what: &str| fail(format!("row {}: bad {what}", lineno + 2));
            let worker: usize = rec.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("worker index"))?;
            let vals: Vec<f64> = rec.iter().skip(1).map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad("number"))?;
            if vals.len() != d + 1 {
                return Err(bad("field count"));
            }
            if rows.len() <= worker {
                rows.resize_with(worker + 1, Vec::new);
            }
            rows[worker].push((vals[..d].to_vec(), vals[d]));
        }
        let workers = rows
            .into_iter()
            .map(|ex| {
                let m = ex.len();
                let features = Array2::from_shape_fn((m, d), |(r, c)| ex[r].0[c]);
                let targets = ex.iter().map(|e| e.1).collect();
                WorkerData { features, targets }
            })
            .collect();
        Self::new(loss, workers, reg)
    }
}

impl Composite for CompositeProblem {
    fn dim(&self) -> usize {
        self.d
    }

    fn smooth_value(&self, x: ArrayView1<f64>) -> f64 {
        (0..self.n_workers()).map(|i| self.local_value(i, x)).sum::<f64>() / self.n_workers() as f64
    }

    fn smooth_grad(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut g = Array1::zeros(self.d);
        for i in 0..self.n_workers() {
            g += &self.full_grad(i, x);
        }
        g / self.n_workers() as f64
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn regularizer(&self) -> &Regularizer {
        &self.reg
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Synthetic data where each worker draws from its own shifted distribution.
///
/// Least-squares: worker `i` regresses on `theta* + delta e_{i mod d}`.
/// Logistic: there are `2n` Gaussian clusters; worker `i` holds clusters
/// `2i` (label 0) and `2i + 1` (label 1), centered at `delta u_k`.
pub fn make_heterogeneous(spec: &ProblemSpec) -> Result<CompositeProblem, ProblemError> {
    if spec.workers < 1 || spec.d < 1 || spec.per_worker < 1 {
        return Err(ProblemError::Invalid(format!(
            "workers ({}), d ({}) and per_worker ({}) must all be >= 1",
            spec.workers, spec.d, spec.per_worker
        )));
    }
    if !(spec.skew_delta.is_finite() && spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(ProblemError::Invalid("skew_delta and noise must be finite, noise >= 0".into()));
    }
    let (n, d, m) = (spec.workers, spec.d, spec.per_worker);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let workers = match spec.loss {
        LossKind::LeastSquares => {
            let theta: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            (0..n)
                .map(|i| {
                    let features = gaussian_matrix(&mut rng, m, d);
                    let mut local = theta.clone();
                    local[i % d] += spec.skew_delta;
                    let mut targets = features.dot(&local);
                    if spec.noise > 0.0 {
                        targets.mapv_inplace(|t| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            t + spec.noise * e
                        });
                    }
                    WorkerData { features, targets }
                })
                .collect()
        }
        LossKind::Logistic => {
            let centers = gaussian_matrix(&mut rng, 2 * n, d) * spec.skew_delta;
            (0..n)
                .map(|i| {
                    let mut features = gaussian_matrix(&mut rng, m, d);
                    let targets: Array1<f64> = (0..m).map(|j| (j % 2) as f64).collect();
                    for (j, mut row) in features.axis_iter_mut(Axis(0)).enumerate() {
                        row += &centers.row(2 * i + j % 2);
                    }
                    WorkerData { features, targets }
                })
                .collect()
        }
    };
    CompositeProblem::new(spec.loss, workers, spec.reg.clone())
}
