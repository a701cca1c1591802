//! Experiment configuration files.
//!
//! A config is a TOML document with four tables:
//!
//! ```toml
//! [problem]
//! loss = "least-squares"      # or "logistic"
//! workers = 5
//! d = 20
//! per_worker = 50
//! skew_delta = 2.0
//! noise = 0.1
//! seed = 0
//! reg = { kind = "l1", mu = 0.01 }
//!
//! [topology]
//! kind = "ring"               # ring | torus2d | complete | custom | matrix
//! scheme = "uniform"          # or "metropolis"
//!
//! [algorithm]
//! id = "cdproxsgt"            # or a list: ["dproxsgt", "cdproxsgt"]
//! preset = "practical"        # thm1 | thm2 | practical
//! batch = 4                   # or "full"
//! compressor = { kind = "topk", ratio = 0.3 }
//!
//! [run]
//! iters = 1000
//! seeds = [1, 2, 3]
//! cadence = 10
//! out = "out"
//! ```
//!
//! Overrides of the form `section.key=value` are applied to the parsed
//! document before it is interpreted; `value` is read as a TOML value and
//! falls back to a bare string.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::algorithms::{AlgorithmId, Preset, StepOverrides};
use crate::compressors::Compressor;
use crate::problems::{Batch, LossKind, ProblemSpec};
use crate::proxops::Regularizer;
use crate::topology::WeightScheme;

/// A validation failure tied to the config key that caused it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// Dotted key path, e.g. `algorithm.eta`; empty for whole-file errors.
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: key.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            write!(f, "invalid config: {}", self.message)
        } else {
            write!(f, "invalid config at `{}`: {}", self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub loss: LossKind,
    pub workers: usize,
    /// Synthetic problems only.
    pub d: Option<usize>,
    pub per_worker: Option<usize>,
    #[serde(default)]
    pub skew_delta: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "zero_reg")]
    pub reg: Regularizer,
    /// CSV written by `CompositeProblem::write_csv`; replaces the generator.
    pub dataset: Option<PathBuf>,
}

fn zero_reg() -> Regularizer {
    Regularizer::Zero
}

impl ProblemBlock {
    /// Generator recipe; `None` when the block points at a dataset.
    pub fn spec(&self) -> Option<ProblemSpec> {
        if self.dataset.is_some() {
            return None;
        }
        Some(ProblemSpec {
            loss: self.loss,
            d: self.d.unwrap_or(0),
            workers: self.workers,
            per_worker: self.per_worker.unwrap_or(0),
            skew_delta: self.skew_delta,
            noise: self.noise,
            reg: self.reg.clone(),
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Ring,
    Torus2d,
    Complete,
    /// Edge list file plus a weight scheme.
    Custom,
    /// Dense weight matrix file.
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyBlock {
    pub kind: TopologyKind,
    #[serde(default = "uniform")]
    pub scheme: WeightScheme,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub path: Option<PathBuf>,
}

fn uniform() -> WeightScheme {
    WeightScheme::Uniform
}

/// One algorithm id or several sharing the same hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlgorithmIds {
    One(AlgorithmId),
    Many(Vec<AlgorithmId>),
}

impl AlgorithmIds {
    pub fn to_vec(&self) -> Vec<AlgorithmId> {
        match self {
            AlgorithmIds::One(a) => vec![*a],
            AlgorithmIds::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmBlock {
    pub id: AlgorithmIds,
    /// Output name; defaults to the algorithm id.
    pub label: Option<String>,
    #[serde(default)]
    pub preset: Preset,
    pub eta: Option<f64>,
    pub gamma_x: Option<f64>,
    pub gamma_y: Option<f64>,
    /// Envelope parameter of the stationarity metric.
    pub lambda: Option<f64>,
    #[serde(default = "full_batch")]
    pub batch: Batch,
    /// Sets both compressors unless a specific one is given.
    pub compressor: Option<Compressor>,
    pub compressor_x: Option<Compressor>,
    pub compressor_y: Option<Compressor>,
}

fn full_batch() -> Batch {
    Batch::Full
}

impl AlgorithmBlock {
    pub fn compressors(&self) -> (Compressor, Compressor) {
        let shared = self.compressor.unwrap_or(Compressor::Identity);
        (self.compressor_x.unwrap_or(shared), self.compressor_y.unwrap_or(shared))
    }

    pub fn overrides(&self) -> StepOverrides {
        StepOverrides { eta: self.eta, gamma_x: self.gamma_x, gamma_y: self.gamma_y, lambda: self.lambda }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Moreau stationarity and Lyapunov evaluation period.
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Std of a random common starting point drawn from the run seed;
    /// 0 starts every run at the origin.
    #[serde(default)]
    pub init_scale: f64,
    /// Gradient-mapping tolerance of the Moreau inner solver.
    pub inner_tol: Option<f64>,
    #[serde(default = "default_inner_iters")]
    pub inner_max_iters: usize,
}

fn default_iters() -> usize {
    100
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_cadence() -> usize {
    10
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_inner_iters() -> usize {
    100_000
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            iters: default_iters(),
            seeds: default_seeds(),
            cadence: default_cadence(),
            out: default_out(),
            init_scale: 0.0,
            inner_tol: None,
            inner_max_iters: default_inner_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemBlock,
    pub topology: TopologyBlock,
    pub algorithm: AlgorithmBlock,
    #[serde(default)]
    pub run: RunBlock,
}

/// Parse `key=value` and store it in `table`, creating tables on the way.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new("", format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::new(key, "empty key segment in override"));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(ConfigError::new(parts[..=depth].join("."), "is not a table, cannot override a key below it")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Parse TOML text, apply overrides, interpret, and check everything
    /// that does not need the assembled problem.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::new("", e.to_string().trim().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { String::new() } else { path };
            ConfigError::new(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("reading {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Data files named in the config are relative to the config's directory.
    fn resolve_paths(&mut self, base: &Path) {
        for p in [self.problem.dataset.as_mut(), self.topology.path.as_mut()].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn algorithms(&self) -> Vec<AlgorithmId> {
        self.algorithm.id.to_vec()
    }

    /// Checks that need no data. Cross-checks against the problem (such as
    /// `lambda L < 1`) happen when the experiment is assembled.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.problem;
        if p.workers < 1 {
            return Err(ConfigError::new("problem.workers", "must be >= 1"));
        }
        match &p.dataset {
            Some(_) => {
                for (key, set) in [("problem.d", p.d.is_some()), ("problem.per_worker", p.per_worker.is_some())] {
                    if set {
                        return Err(ConfigError::new(key, "is determined by the dataset and must not be set"));
                    }
                }
            }
            None => {
                for (key, v) in [("problem.d", p.d), ("problem.per_worker", p.per_worker)] {
                    match v {
                        None => return Err(ConfigError::new(key, "is required for a synthetic problem")),
                        Some(0) => return Err(ConfigError::new(key, "must be >= 1")),
                        Some(_) => {}
                    }
                }
                if !p.skew_delta.is_finite() {
                    return Err(ConfigError::new("problem.skew_delta", "must be finite"));
                }
                if !(p.noise.is_finite() && p.noise >= 0.0) {
                    return Err(ConfigError::new("problem.noise", "must be finite and >= 0"));
                }
            }
        }
        if let Some(d) = p.d {
            p.reg.validate(d).map_err(|e| ConfigError::new("problem.reg", e.to_string()))?;
        }

        let t = &self.topology;
        match t.kind {
            TopologyKind::Torus2d => {
                let (rows, cols) = match (t.rows, t.cols) {
                    (Some(r), Some(c)) => (r, c),
                    (None, _) => return Err(ConfigError::new("topology.rows", "is required for torus2d")),
                    (_, None) => return Err(ConfigError::new("topology.cols", "is required for torus2d")),
                };
                if rows * cols != p.workers {
                    return Err(ConfigError::new(
                        "topology.rows",
                        format!("rows x cols = {} must equal problem.workers = {}", rows * cols, p.workers),
                    ));
                }
            }
            TopologyKind::Custom | TopologyKind::Matrix if t.path.is_none() => {
                return Err(ConfigError::new("topology.path", "is required for custom and matrix topologies"));
            }
            TopologyKind::Ring if p.workers < 2 => {
                return Err(ConfigError::new("topology.kind", "a ring needs problem.workers >= 2"));
            }
            _ => {}
        }
        if t.kind != TopologyKind::Torus2d && (t.rows.is_some() || t.cols.is_some()) {
            return Err(ConfigError::new("topology.rows", "rows/cols only apply to torus2d"));
        }

        let a = &self.algorithm;
        let ids = a.id.to_vec();
        if ids.is_empty() {
            return Err(ConfigError::new("algorithm.id", "needs at least one algorithm"));
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return Err(ConfigError::new("algorithm.id", "lists an algorithm twice"));
        }
        if a.label.is_some() && ids.len() > 1 {
            return Err(ConfigError::new("algorithm.label", "can only be set for a single algorithm"));
        }
        if let Some(label) = &a.label {
            if label.is_empty() || label.contains(['/', '\\']) {
                return Err(ConfigError::new("algorithm.label", "must be a non-empty file-name-safe string"));
            }
        }
        if let Some(eta) = a.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(ConfigError::new("algorithm.eta", format!("must be > 0, got {eta}")));
            }
        }
        for (key, g) in [("algorithm.gamma_x", a.gamma_x), ("algorithm.gamma_y", a.gamma_y)] {
            if let Some(g) = g {
                if !(g > 0.0 && g <= 1.0) {
                    return Err(ConfigError::new(key, format!("must lie in (0, 1], got {g}")));
                }
            }
        }
        if let Some(l) = a.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(ConfigError::new("algorithm.lambda", format!("must be > 0, got {l}")));
            }
        }
        for (key, c) in [("algorithm.compressor", a.compressor), ("algorithm.compressor_x", a.compressor_x), ("algorithm.compressor_y", a.compressor_y)] {
            if let Some(c) = c {
                c.validate().map_err(|e| ConfigError::new(key, e.to_string()))?;
            }
        }

        let r = &self.run;
        if r.seeds.is_empty() {
            return Err(ConfigError::new("run.seeds", "needs at least one seed"));
        }
        if r.seeds.iter().collect::<BTreeSet<_>>().len() != r.seeds.len() {
            return Err(ConfigError::new("run.seeds", "contains a duplicate seed"));
        }
        if r.cadence < 1 {
            return Err(ConfigError::new("run.cadence", "must be >= 1"));
        }
        if !(r.init_scale.is_finite() && r.init_scale >= 0.0) {
            return Err(ConfigError::new("run.init_scale", "must be finite and >= 0"));
        }
        if let Some(tol) = r.inner_tol {
            if !(tol > 0.0) {
                return Err(ConfigError::new("run.inner_tol", "must be > 0"));
            }
        }
        if r.inner_max_iters < 1 {
            return Err(ConfigError::new("run.inner_max_iters", "must be >= 1"));
        }
        Ok(())
    }
}
