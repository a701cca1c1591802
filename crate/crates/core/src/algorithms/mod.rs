//! Decentralized proximal optimizers on a simulated worker network.
//!
//! All state is kept in matrix form: column `i` of a `d x n` matrix is the
//! vector held by worker `i`, and one gossip round is a right multiplication
//! by the mixing matrix, `(X W)_i = sum_j W_ji x_j`.
//!
//! Every iteration is split into a *tracking* phase, which samples fresh
//! stochastic gradients and produces the tracker `Y^t`, and a *model*
//! phase, which takes the proximal step and gossips the iterates. The
//! tracking phase is pure, so diagnostics can evaluate the tracker for the
//! current iterate before the step commits it.

mod presets;
mod runner;

pub use presets::{Preset, ResolvedParams, StepOverrides};
pub use runner::{run, MetricsHooks, Trajectory};

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressors::{Compressor, CompressorError};
use crate::metrics::MetricsError;
use crate::problems::{Batch, CompositeProblem};
use crate::proxops::Composite;
use crate::rng::{Purpose, StreamFactory};
use crate::topology::MixingMatrix;

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Compressor(#[from] CompressorError),
    #[error("iterate became non-finite at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlgorithmId {
    /// Proximal gradient tracking, uncompressed.
    #[serde(rename = "dproxsgt")]
    DProxSgt,
    /// Compressed proximal gradient tracking in the matrix form that
    /// communicates the full estimate tables.
    #[serde(rename = "cdproxsgt-reference")]
    CDProxSgtReference,
    /// Same iterates, but only compressed residues are exchanged and the
    /// neighbor aggregates are maintained incrementally.
    #[serde(rename = "cdproxsgt", alias = "cdproxsgt-efficient")]
    CDProxSgt,
    /// Decentralized proximal SGD without gradient tracking.
    #[serde(rename = "dproxsgd-baseline")]
    DProxSgdBaseline,
}

impl AlgorithmId {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmId::DProxSgt => "dproxsgt",
            AlgorithmId::CDProxSgtReference => "cdproxsgt-reference",
            AlgorithmId::CDProxSgt => "cdproxsgt",
            AlgorithmId::DProxSgdBaseline => "dproxsgd-baseline",
        }
    }

    pub fn is_compressed(&self) -> bool {
        matches!(self, AlgorithmId::CDProxSgt | AlgorithmId::CDProxSgtReference)
    }

    pub fn tracks_gradient(&self) -> bool {
        !matches!(self, AlgorithmId::DProxSgdBaseline)
    }
}

impl fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AlgorithmId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dproxsgt" => Ok(AlgorithmId::DProxSgt),
            "cdproxsgt" | "cdproxsgt-efficient" => Ok(AlgorithmId::CDProxSgt),
            "cdproxsgt-reference" => Ok(AlgorithmId::CDProxSgtReference),
            "dproxsgd-baseline" => Ok(AlgorithmId::DProxSgdBaseline),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

/// Resolved hyperparameters of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgoConfig {
    pub eta: f64,
    pub gamma_x: f64,
    pub gamma_y: f64,
    pub batch: Batch,
    pub iters: usize,
    pub compressor_x: Compressor,
    pub compressor_y: Compressor,
}

impl AlgoConfig {
    /// Uncompressed defaults: identity compressors and `gamma = 1`.
    pub fn new(eta: f64, batch: Batch, iters: usize) -> Self {
        Self {
            eta,
            gamma_x: 1.0,
            gamma_y: 1.0,
            batch,
            iters,
            compressor_x: Compressor::Identity,
            compressor_y: Compressor::Identity,
        }
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(AlgoError::InvalidConfig(format!("eta = {} must be > 0", self.eta)));
        }
        for (name, g) in [("gamma_x", self.gamma_x), ("gamma_y", self.gamma_y)] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(AlgoError::InvalidConfig(format!("{name} = {g} must lie in (0, 1]")));
            }
        }
        if self.batch == Batch::Size(0) {
            return Err(AlgoError::InvalidConfig("batch size must be >= 1".into()));
        }
        self.compressor_x.validate()?;
        self.compressor_y.validate()?;
        Ok(())
    }
}

/// Estimate tables and neighbor aggregates of the compressed method.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionState {
    /// Receiver-side estimates of the models.
    pub x_est: Array2<f64>,
    /// Receiver-side estimates of the trackers.
    pub y_est: Array2<f64>,
    /// Incremental `x_est W`.
    pub s: Array2<f64>,
    /// Incremental `y_est W`.
    pub z: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoState {
    /// Models `X^t`, `d x n`.
    pub x: Array2<f64>,
    /// Last committed tracker `Y^{t-1}`.
    pub y: Array2<f64>,
    /// Stochastic gradients `grad F^{t-1}` from the previous iteration.
    pub g_prev: Array2<f64>,
    pub comp: Option<CompressionState>,
    /// Index of the next iteration.
    pub t: usize,
    pub bits: u64,
}

impl AlgoState {
    /// Every worker starts from `x0`; trackers and previous gradients are zero.
    pub fn new(x0: ArrayView1<f64>, n: usize, compressed: bool) -> Self {
        let d = x0.len();
        let x = Array2::from_shape_fn((d, n), |(r, _)| x0[r]);
        let zeros = Array2::<f64>::zeros((d, n));
        let comp = compressed.then(|| CompressionState {
            x_est: zeros.clone(),
            y_est: zeros.clone(),
            s: zeros.clone(),
            z: zeros.clone(),
        });
        Self { x, y: zeros.clone(), g_prev: zeros, comp, t: 0, bits: 0 }
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn workers(&self) -> usize {
        self.x.ncols()
    }
}

/// Everything a step needs besides the state.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub problem: &'a CompositeProblem,
    pub mixing: &'a MixingMatrix,
    pub cfg: &'a AlgoConfig,
    pub streams: StreamFactory,
}

impl StepContext<'_> {
    fn check(&self, state: &AlgoState, algo: AlgorithmId) -> Result<(), AlgoError> {
        let (d, n) = state.x.dim();
        if self.problem.dim() != d {
            return Err(AlgoError::DimensionMismatch(format!("problem has d = {}, state has d = {d}", self.problem.dim())));
        }
        if self.problem.n_workers() != n || self.mixing.n() != n {
            return Err(AlgoError::DimensionMismatch(format!(
                "state has {n} workers, problem has {}, mixing matrix is {}x{}",
                self.problem.n_workers(),
                self.mixing.n(),
                self.mixing.n()
            )));
        }
        if algo.is_compressed() != state.comp.is_some() {
            return Err(AlgoError::DimensionMismatch(format!("state compression tables do not match {algo}")));
        }
        Ok(())
    }
}

/// Output of the tracking phase for iteration `t`.
#[derive(Debug, Clone)]
pub struct Tracking {
    /// Fresh stochastic gradients `grad F^t`.
    pub grads: Array2<f64>,
    /// Tracker `Y^t` used by the proximal step (the gradients themselves for
    /// the no-tracking baseline).
    pub y: Array2<f64>,
    /// Updated tracker estimates and aggregate (compressed methods).
    pub y_est: Option<Array2<f64>>,
    pub z: Option<Array2<f64>>,
}

fn sample_gradients(ctx: &StepContext<'_>, x: &Array2<f64>, t: usize) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    for (i, mut col) in g.columns_mut().into_iter().enumerate() {
        let mut rng = ctx.streams.stream(Purpose::Sample, i, t);
        col.assign(&ctx.problem.stoch_grad(i, x.column(i), ctx.cfg.batch, &mut rng).grad);
    }
    g
}

/// Column-wise `Q[m]`, each worker drawing from its own stream.
fn compress_columns(q: &Compressor, m: &Array2<f64>, streams: StreamFactory, purpose: Purpose, t: usize) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (i, mut col) in out.columns_mut().into_iter().enumerate() {
        let mut rng = streams.stream(purpose, i, t);
        col.assign(&q.compress(m.column(i), &mut rng).0);
    }
    out
}

/// `Y^{t-1} + grad F^t - grad F^{t-1}`
fn tracking_half_step(state: &AlgoState, grads: &Array2<f64>) -> Array2<f64> {
    let mut y_half = state.y.clone();
    Zip::from(&mut y_half).and(grads).and(&state.g_prev).for_each(|y, &g, &gp| *y += g - gp);
    y_half
}

/// Tracking phase of `algo` at iteration `state.t`. Does not modify `state`.
pub fn track(algo: AlgorithmId, state: &AlgoState, ctx: &StepContext<'_>) -> Result<Tracking, AlgoError> {
    ctx.check(state, algo)?;
    let t = state.t;
    let grads = sample_gradients(ctx, &state.x, t);
    let w = ctx.mixing.weights();
    let tracking = match algo {
        AlgorithmId::DProxSgdBaseline => Tracking { y: grads.clone(), grads, y_est: None, z: None },
        AlgorithmId::DProxSgt => {
            let y = tracking_half_step(state, &grads).dot(w);
            Tracking { grads, y, y_est: None, z: None }
        }
        AlgorithmId::CDProxSgtReference | AlgorithmId::CDProxSgt => {
            let comp = state.comp.as_ref().expect("checked above");
            let y_half = tracking_half_step(state, &grads);
            let residue = compress_columns(&ctx.cfg.compressor_y, &(&y_half - &comp.y_est), ctx.streams, Purpose::CompressY, t);
            let y_est = &comp.y_est + &residue;
            let gamma = ctx.cfg.gamma_y;
            let (y, z) = if algo == AlgorithmId::CDProxSgtReference {
                let mixed = y_est.dot(w);
                (&y_half + &((&mixed - &y_est) * gamma), None)
            } else {
                let z = &comp.z + &residue.dot(w);
                (&y_half + &((&z - &y_est) * gamma), Some(z))
            };
            Tracking { grads, y, y_est: Some(y_est), z }
        }
    };
    Ok(tracking)
}

/// `prox_{eta r}(x_i - eta d_i)` for every column.
fn prox_columns(ctx: &StepContext<'_>, x: &Array2<f64>, direction: &Array2<f64>) -> Array2<f64> {
    let eta = ctx.cfg.eta;
    let mut half = x - &(direction * eta);
    let reg = ctx.problem.regularizer();
    for col in half.columns_mut() {
        reg.prox_in_place(eta, col);
    }
    half
}

/// Bits sent by all workers in one iteration: each worker sends its
/// message(s) to each of its neighbors.
pub fn bits_per_iteration(algo: AlgorithmId, mixing: &MixingMatrix, cfg: &AlgoConfig, d: usize) -> u64 {
    let per_neighbor = match algo {
        AlgorithmId::DProxSgt => 2 * Compressor::Identity.bit_cost(d),
        AlgorithmId::DProxSgdBaseline => Compressor::Identity.bit_cost(d),
        AlgorithmId::CDProxSgt | AlgorithmId::CDProxSgtReference => {
            cfg.compressor_y.bit_cost(d) + cfg.compressor_x.bit_cost(d)
        }
    };
    mixing.degrees().iter().map(|&deg| deg as u64 * per_neighbor).sum()
}

/// Model phase: proximal step with the tracker from `tracking`, then gossip.
/// Commits the tracking output into `state` and advances `state.t`.
pub fn advance(algo: AlgorithmId, state: &mut AlgoState, tracking: Tracking, ctx: &StepContext<'_>) -> Result<(), AlgoError> {
    ctx.check(state, algo)?;
    let w = ctx.mixing.weights();
    let x_half = prox_columns(ctx, &state.x, &tracking.y);
    match algo {
        AlgorithmId::DProxSgt | AlgorithmId::DProxSgdBaseline => {
            state.x = x_half.dot(w);
        }
        AlgorithmId::CDProxSgtReference | AlgorithmId::CDProxSgt => {
            let comp = state.comp.as_mut().expect("checked above");
            let residue = compress_columns(&ctx.cfg.compressor_x, &(&x_half - &comp.x_est), ctx.streams, Purpose::CompressX, state.t);
            comp.x_est += &residue;
            let gamma = ctx.cfg.gamma_x;
            state.x = if algo == AlgorithmId::CDProxSgtReference {
                &x_half + &((&comp.x_est.dot(w) - &comp.x_est) * gamma)
            } else {
                comp.s += &residue.dot(w);
                &x_half + &((&comp.s - &comp.x_est) * gamma)
            };
            comp.y_est = tracking.y_est.expect("compressed tracking carries estimates");
            if let Some(z) = tracking.z {
                comp.z = z;
            }
        }
    }
    state.y = tracking.y;
    state.g_prev = tracking.grads;
    state.bits += bits_per_iteration(algo, ctx.mixing, ctx.cfg, state.dim());
    let iteration = state.t;
    state.t += 1;
    if state.x.iter().chain(state.y.iter()).any(|v| !v.is_finite()) {
        return Err(AlgoError::Divergence { iteration });
    }
    Ok(())
}

/// One full iteration of `algo`.
pub fn step(algo: AlgorithmId, state: &mut AlgoState, ctx: &StepContext<'_>) -> Result<(), AlgoError> {
    let tracking = track(algo, state, ctx)?;
    advance(algo, state, tracking, ctx)
}

pub fn dproxsgt_step(state: &mut AlgoState, ctx: &StepContext<'_>) -> Result<(), AlgoError> {
    step(AlgorithmId::DProxSgt, state, ctx)
}

pub fn cdproxsgt_step_reference(state: &mut AlgoState, ctx: &StepContext<'_>) -> Result<(), AlgoError> {
    step(AlgorithmId::CDProxSgtReference, state, ctx)
}

pub fn cdproxsgt_step_efficient(state: &mut AlgoState, ctx: &StepContext<'_>) -> Result<(), AlgoError> {
    step(AlgorithmId::CDProxSgt, state, ctx)
}

pub fn dproxsgd_baseline_step(state: &mut AlgoState, ctx: &StepContext<'_>) -> Result<(), AlgoError> {
    step(AlgorithmId::DProxSgdBaseline, state, ctx)
}

/// `max_j |mean_i y_ij - mean_i g_ij|`
pub fn tracking_mean_gap(y: &Array2<f64>, grads: &Array2<f64>) -> f64 {
    let n = y.ncols() as f64;
    let gap: Array1<f64> = (y - grads).sum_axis(ndarray::Axis(1)) / n;
    gap.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}
