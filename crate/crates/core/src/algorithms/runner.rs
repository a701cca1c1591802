use ndarray::{Array1, ArrayView1};

use super::{advance, track, tracking_mean_gap, AlgoConfig, AlgoError, AlgoState, AlgorithmId, StepContext, Tracking};
use crate::metrics::{
    column_mean, consensus_error, lyapunov_with_envelope, weighted_stationarity, IterationRecord, LyapunovWeights,
    Snapshot, Weighting, WorkerEnvelopes,
};
use crate::problems::CompositeProblem;
use crate::proxops::{Composite, MoreauOracleConfig};
use crate::rng::StreamFactory;
use crate::topology::MixingMatrix;

/// What to measure during a run.
#[derive(Debug, Clone, Copy)]
pub struct MetricsHooks {
    pub moreau: MoreauOracleConfig,
    /// Moreau stationarity and the Lyapunov value are evaluated every
    /// `cadence` iterations and at the last one.
    pub cadence: usize,
    pub lyapunov: Option<LyapunovWeights>,
}

impl MetricsHooks {
    pub fn new(lambda: f64) -> Self {
        Self { moreau: MoreauOracleConfig::new(lambda), cadence: 10, lyapunov: None }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub algorithm: AlgorithmId,
    pub seed: u64,
    /// One record per snapshot `t = 0..=T`.
    pub records: Vec<IterationRecord>,
    pub final_state: AlgoState,
    /// `|mean y^t - mean grad F^t|` per iteration (empty for the baseline).
    pub tracking_gaps: Vec<f64>,
}

impl Trajectory {
    fn stat_values(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records.iter().filter_map(|r| r.stat_def2.map(|s| (r.t, s)))
    }

    /// Last measured `stat_def2`.
    pub fn final_stationarity(&self) -> Option<f64> {
        self.stat_values().last().map(|(_, s)| s)
    }

    pub fn best_stationarity(&self) -> Option<f64> {
        self.stat_values().map(|(_, s)| s).reduce(f64::min)
    }

    /// Mean of the measured `stat_def2` over `t < T`: the expectation of the
    /// metric at a uniformly sampled iterate.
    pub fn mean_stationarity(&self) -> Option<f64> {
        let last = self.records.last()?.t;
        let vals: Vec<f64> = self.stat_values().filter(|&(t, _)| t < last || last == 0).map(|(_, s)| s).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn max_tracking_gap(&self) -> f64 {
        self.tracking_gaps.iter().copied().fold(0.0, f64::max)
    }
}

fn record(
    t: usize,
    last: bool,
    state: &AlgoState,
    tracking: &Tracking,
    algo: AlgorithmId,
    ctx: &StepContext<'_>,
    hooks: &MetricsHooks,
) -> Result<IterationRecord, AlgoError> {
    let problem = ctx.problem;
    let n = state.workers();
    let x_bar = column_mean(state.x.view());
    let consensus_x = consensus_error(state.x.view());
    let sq = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| (a - b).mapv(|v| v * v).sum();
    let comp_err_x = state.comp.as_ref().map(|c| sq(&state.x, &c.x_est));
    let comp_err_y = tracking.y_est.as_ref().map(|ye| sq(&tracking.y, ye));
    let mut rec = IterationRecord {
        t,
        objective: problem.objective(x_bar.view()),
        consensus_x,
        consensus_y: algo.tracks_gradient().then(|| consensus_error(tracking.y.view())),
        comp_err_x,
        comp_err_y,
        moreau_stat: None,
        stat_def2: None,
        stat_thm: None,
        lyapunov: None,
        bits_cum: state.bits,
    };
    if t % hooks.cadence.max(1) == 0 || last {
        let env = WorkerEnvelopes::compute(problem, &hooks.moreau, state.x.view())?;
        let moreau = env.moreau_stat(state.x.view());
        let (l, lambda) = (problem.smoothness(), hooks.moreau.lambda);
        rec.moreau_stat = Some(moreau);
        rec.stat_def2 = Some(weighted_stationarity(moreau, consensus_x, n, l, lambda, Weighting::Def2));
        rec.stat_thm = Some(weighted_stationarity(moreau, consensus_x, n, l, lambda, Weighting::Thm { eta: ctx.cfg.eta }));
        if let Some(weights) = &hooks.lyapunov {
            let snap = Snapshot {
                x: state.x.view(),
                y: tracking.y.view(),
                x_est: state.comp.as_ref().map(|c| c.x_est.view()),
                y_est: tracking.y_est.as_ref().map(|y| y.view()),
            };
            rec.lyapunov = Some(lyapunov_with_envelope(&snap, weights, env.envelope_sum())?);
        }
    }
    Ok(rec)
}

/// Run `cfg.iters` iterations of `algo` from `x0` (zero when `None`) on every
/// worker. The result depends only on the arguments and `seed`.
pub fn run(
    algo: AlgorithmId,
    problem: &CompositeProblem,
    mixing: &MixingMatrix,
    cfg: &AlgoConfig,
    x0: Option<ArrayView1<f64>>,
    seed: u64,
    hooks: &MetricsHooks,
) -> Result<Trajectory, AlgoError> {
    cfg.validate()?;
    hooks.moreau.check(problem.smoothness()).map_err(|e| AlgoError::InvalidConfig(e.to_string()))?;
    let zero = Array1::zeros(problem.dim());
    let x0 = x0.unwrap_or(zero.view());
    if x0.len() != problem.dim() {
        return Err(AlgoError::DimensionMismatch(format!("x0 has length {}, problem has d = {}", x0.len(), problem.dim())));
    }
    let mut state = AlgoState::new(x0, mixing.n(), algo.is_compressed());
    let ctx = StepContext { problem, mixing, cfg, streams: StreamFactory::new(seed) };
    let mut records = Vec::with_capacity(cfg.iters + 1);
    let mut gaps = Vec::with_capacity(cfg.iters + 1);
    for t in 0..=cfg.iters {
        let tracking = track(algo, &state, &ctx)?;
        if algo.tracks_gradient() {
            gaps.push(tracking_mean_gap(&tracking.y, &tracking.grads));
        }
        records.push(record(t, t == cfg.iters, &state, &tracking, algo, &ctx, hooks)?);
        if t == cfg.iters {
            break;
        }
        advance(algo, &mut state, tracking, &ctx)?;
    }
    Ok(Trajectory { algorithm: algo, seed, records, final_state: state, tracking_gaps: gaps })
}
