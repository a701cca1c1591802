//! Per-iteration diagnostics and the CSV / metadata artifacts.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, ArrayView2, Axis};
use thiserror::Error;

use crate::problems::CompositeProblem;
use crate::proxops::{moreau_envelope, Composite, MoreauOracleConfig, ProxError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("Moreau oracle failed for worker {worker}: {source}")]
    Prox { worker: usize, source: ProxError },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("lyapunov weights expect a {expected} snapshot")]
    WeightMismatch { expected: &'static str },
}

/// Fixed CSV column order.
pub const CSV_HEADER: [&str; 11] = [
    "t",
    "objective",
    "consensus_x",
    "consensus_y",
    "comp_err_x",
    "comp_err_y",
    "moreau_stat",
    "stat_def2",
    "stat_thm",
    "lyapunov",
    "bits_cum",
];

/// One row of the metrics CSV. `None` marks a field that was not measured
/// at this iteration (off-cadence, or not applicable to the algorithm).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    /// `phi` at the worker average.
    pub objective: f64,
    pub consensus_x: f64,
    /// Consensus error of the tracker used at iteration `t`.
    pub consensus_y: Option<f64>,
    pub comp_err_x: Option<f64>,
    pub comp_err_y: Option<f64>,
    /// `(1/n) sum_i ||grad phi_lambda(x_i)||^2`
    pub moreau_stat: Option<f64>,
    /// `moreau_stat + (L^2 / n) ||X_perp||^2`
    pub stat_def2: Option<f64>,
    /// `moreau_stat + (4 / (lambda eta n)) ||X_perp||^2`
    pub stat_thm: Option<f64>,
    pub lyapunov: Option<f64>,
    pub bits_cum: u64,
}

/// `||M (I - J)||_F^2`: total squared deviation of the columns from their mean.
pub fn consensus_error(m: ArrayView2<f64>) -> f64 {
    let n = m.ncols();
    if n == 0 {
        return 0.0;
    }
    let mean = m.mean_axis(Axis(1)).expect("n >= 1");
    m.columns().into_iter().map(|c| (&c - &mean).mapv(|v| v * v).sum()).sum()
}

/// Column mean of a `d x n` matrix.
pub fn column_mean(m: ArrayView2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(1)).expect("at least one column")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// `L^2` on the consensus term.
    Def2,
    /// `4 / (lambda eta)` on the consensus term.
    Thm { eta: f64 },
}

/// Envelope value and proximal point for each worker column.
#[derive(Debug, Clone)]
pub struct WorkerEnvelopes {
    pub values: Vec<f64>,
    pub prox_points: Vec<Array1<f64>>,
    lambda: f64,
}

impl WorkerEnvelopes {
    pub fn compute(problem: &CompositeProblem, cfg: &MoreauOracleConfig, x: ArrayView2<f64>) -> Result<Self, MetricsError> {
        let mut values = Vec::with_capacity(x.ncols());
        let mut prox_points = Vec::with_capacity(x.ncols());
        for (worker, col) in x.columns().into_iter().enumerate() {
            let (v, p) = moreau_envelope(problem, cfg, col).map_err(|source| MetricsError::Prox { worker, source })?;
            values.push(v);
            prox_points.push(p);
        }
        Ok(Self { values, prox_points, lambda: cfg.lambda })
    }

    /// `(1/n) sum_i ||(x_i - x_hat_i) / lambda||^2`
    pub fn moreau_stat(&self, x: ArrayView2<f64>) -> f64 {
        let n = x.ncols() as f64;
        let total: f64 = x
            .columns()
            .into_iter()
            .zip(&self.prox_points)
            .map(|(c, p)| (&c - p).mapv(|v| v * v).sum() / (self.lambda * self.lambda))
            .sum();
        total / n
    }

    pub fn envelope_sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Stationarity of a worker configuration under the chosen consensus weighting.
pub fn stationarity(
    problem: &CompositeProblem,
    cfg: &MoreauOracleConfig,
    x: ArrayView2<f64>,
    weighting: Weighting,
) -> Result<f64, MetricsError> {
    let env = WorkerEnvelopes::compute(problem, cfg, x)?;
    Ok(weighted_stationarity(env.moreau_stat(x), consensus_error(x), x.ncols(), problem.smoothness(), cfg.lambda, weighting))
}

pub fn weighted_stationarity(moreau_stat: f64, consensus_x: f64, n: usize, smoothness: f64, lambda: f64, weighting: Weighting) -> f64 {
    let w = match weighting {
        Weighting::Def2 => smoothness * smoothness,
        Weighting::Thm { eta } => 4.0 / (lambda * eta),
    };
    moreau_stat + w * consensus_x / n as f64
}

/// Weight vectors of the Lyapunov functions used in the convergence analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LyapunovWeights {
    /// `z1 ||X_perp||^2 + z2 ||Y_perp||^2 + z3 sum_i phi_lambda(x_i)`
    Tracking([f64; 3]),
    /// `z1 ||X_perp||^2 + z2 ||X - X_est||^2 + z3 ||Y_perp||^2 + z4 ||Y - Y_est||^2 + z5 sum_i phi_lambda(x_i)`
    Compressed([f64; 5]),
}

impl LyapunovWeights {
    pub fn tracking(rho: f64, eta: f64, lambda: f64) -> Self {
        let gap = 1.0 - rho * rho;
        let z1 = 10.0 / gap;
        let z2 = (80.0 * rho * rho / gap.powi(3) + 16.0 / gap) * eta * eta;
        LyapunovWeights::Tracking([z1, z2, lambda])
    }

    pub fn compressed(rho_hat_x: f64, rho_hat_y: f64, alpha_sq: f64, eta: f64, lambda: f64) -> Self {
        let gx = 1.0 - rho_hat_x * rho_hat_x;
        let gy = 1.0 - rho_hat_y * rho_hat_y;
        LyapunovWeights::Compressed([
            52.0 / gx,
            448.0 / (1.0 - alpha_sq) * eta,
            521.0 / (gx * gx * gy) * eta * eta,
            (1.0 - alpha_sq) * eta * eta,
            lambda,
        ])
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            LyapunovWeights::Tracking(z) => z,
            LyapunovWeights::Compressed(z) => z,
        }
    }
}

/// Matrices the Lyapunov function is evaluated on, all `d x n`. `y` is the
/// tracker used at this iteration.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView2<'a, f64>,
    pub x_est: Option<ArrayView2<'a, f64>>,
    pub y_est: Option<ArrayView2<'a, f64>>,
}

fn sq_dist(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    (&a - &b).mapv(|v| v * v).sum()
}

/// Lyapunov value from a precomputed envelope sum.
pub fn lyapunov_with_envelope(snap: &Snapshot<'_>, weights: &LyapunovWeights, envelope_sum: f64) -> Result<f64, MetricsError> {
    let cx = consensus_error(snap.x);
    let cy = consensus_error(snap.y);
    match weights {
        LyapunovWeights::Tracking([z1, z2, z3]) => Ok(z1 * cx + z2 * cy + z3 * envelope_sum),
        LyapunovWeights::Compressed([z1, z2, z3, z4, z5]) => {
            let (xe, ye) = snap.x_est.zip(snap.y_est).ok_or(MetricsError::WeightMismatch { expected: "compressed" })?;
            Ok(z1 * cx + z2 * sq_dist(snap.x, xe) + z3 * cy + z4 * sq_dist(snap.y, ye) + z5 * envelope_sum)
        }
    }
}

pub fn lyapunov(
    snap: &Snapshot<'_>,
    weights: &LyapunovWeights,
    problem: &CompositeProblem,
    cfg: &MoreauOracleConfig,
) -> Result<f64, MetricsError> {
    let env = WorkerEnvelopes::compute(problem, cfg, snap.x)?;
    lyapunov_with_envelope(snap, weights, env.envelope_sum())
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Write the header and one row per record.
pub fn write_records<W: Write>(records: &[IterationRecord], out: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CSV_HEADER)?;
    for r in records {
        wtr.write_record([
            r.t.to_string(),
            fmt_float(r.objective),
            fmt_float(r.consensus_x),
            fmt_opt(r.consensus_y),
            fmt_opt(r.comp_err_x),
            fmt_opt(r.comp_err_y),
            fmt_opt(r.moreau_stat),
            fmt_opt(r.stat_def2),
            fmt_opt(r.stat_thm),
            fmt_opt(r.lyapunov),
            r.bits_cum.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn emit_csv(records: &[IterationRecord], path: &Path) -> Result<(), MetricsError> {
    let io = |message: String| MetricsError::Io { path: path.display().to_string(), message };
    let file = std::fs::File::create(path).map_err(|e| io(e.to_string()))?;
    write_records(records, std::io::BufWriter::new(file)).map_err(|e| io(e.to_string()))
}

pub fn read_csv(path: &Path) -> Result<Vec<IterationRecord>, MetricsError> {
    let io = |message: String| MetricsError::Io { path: path.display().to_string(), message };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io(e.to_string()))?;
    let header: Vec<String> = rdr.headers().map_err(|e| io(e.to_string()))?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(io(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| io(e.to_string()))?;
        let bad = |col: usize| io(format!("row {}: cannot parse column {}", row + 2, CSV_HEADER[col]));
        let num = |col: usize| rec[col].parse::<f64>().map_err(|_| bad(col));
        let opt = |col: usize| if rec[col].is_empty() { Ok(None) } else { num(col).map(Some) };
        out.push(IterationRecord {
            t: rec[0].parse().map_err(|_| bad(0))?,
            objective: num(1)?,
            consensus_x: num(2)?,
            consensus_y: opt(3)?,
            comp_err_x: opt(4)?,
            comp_err_y: opt(5)?,
            moreau_stat: opt(6)?,
            stat_def2: opt(7)?,
            stat_thm: opt(8)?,
            lyapunov: opt(9)?,
            bits_cum: rec[10].parse().map_err(|_| bad(10))?,
        });
    }
    Ok(out)
}

/// `key=value` sidecar, one entry per line, in the given order.
pub fn write_metadata(path: &Path, entries: &[(String, String)]) -> Result<(), MetricsError> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push('=');
        text.push_str(&v.replace('\n', " "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| MetricsError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn read_metadata(path: &Path) -> Result<Vec<(String, String)>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Io { path: path.display().to_string(), message: e.to_string() })?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{LossKind, WorkerData};
    use crate::proxops::Regularizer;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// `f(x) = 0.5 x^2` on one worker (single example a = 1, b = 0).
    fn half_square(workers: usize) -> CompositeProblem {
        let data = (0..workers).map(|_| WorkerData { features: array![[1.0]], targets: array![0.0] }).collect();
        CompositeProblem::new(LossKind::LeastSquares, data, Regularizer::Zero).unwrap()
    }

    #[test]
    fn consensus_examples() {
        assert_eq!(consensus_error(array![[1.0, -1.0]].view()), 2.0);
        assert_eq!(consensus_error(array![[2.0, 2.0, 2.0], [1.0, 1.0, 1.0]].view()), 0.0);
    }

    #[test]
    fn consensus_matches_direct_sum() {
        let m = array![[0.3, -1.2, 2.0, 0.7], [1.1, 0.0, -0.4, 0.9], [5.0, 4.0, 3.0, -2.0]];
        let mut direct = 0.0;
        for r in 0..3 {
            let mean: f64 = (0..4).map(|c| m[[r, c]]).sum::<f64>() / 4.0;
            for c in 0..4 {
                direct += (m[[r, c]] - mean).powi(2);
            }
        }
        assert_abs_diff_eq!(consensus_error(m.view()), direct, epsilon = 1e-12);
    }

    #[test]
    fn single_worker_stationarity() {
        let p = half_square(1);
        let cfg = MoreauOracleConfig::new(0.5);
        let s = stationarity(&p, &cfg, array![[3.0]].view(), Weighting::Def2).unwrap();
        assert_abs_diff_eq!(s, 4.0, epsilon = 1e-8);
    }

    #[test]
    fn stationary_consensus_is_zero() {
        let p = half_square(3);
        let cfg = MoreauOracleConfig::new(0.5);
        let s = stationarity(&p, &cfg, Array2::zeros((1, 3)).view(), Weighting::Thm { eta: 0.1 }).unwrap();
        assert!(s.abs() < 1e-8);
    }

    #[test]
    fn def2_is_compositional() {
        let p = half_square(2);
        let cfg = MoreauOracleConfig::new(0.5);
        let delta = 0.3;
        let x = array![[1.0 + delta, 1.0 - delta]];
        let g1 = crate::proxops::moreau_grad(&p, &cfg, x.column(0)).unwrap();
        let g2 = crate::proxops::moreau_grad(&p, &cfg, x.column(1)).unwrap();
        let l = p.smoothness();
        let expect = 0.5 * (g1.dot(&g1) + g2.dot(&g2)) + l * l / 2.0 * consensus_error(x.view());
        let got = stationarity(&p, &cfg, x.view(), Weighting::Def2).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn tracking_weights_vanish_with_step() {
        let w = LyapunovWeights::tracking(0.5, 0.0, 0.1);
        assert_eq!(w.as_slice()[1], 0.0);
        let LyapunovWeights::Tracking([z1, z2, z3]) = LyapunovWeights::tracking(0.5, 0.01, 0.1) else { unreachable!() };
        assert_abs_diff_eq!(z1, 10.0 / 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(z2, (80.0 * 0.25 / 0.75f64.powi(3) + 16.0 / 0.75) * 1e-4, epsilon = 1e-15);
        assert_eq!(z3, 0.1);
    }

    #[test]
    fn lyapunov_at_consensus_stationary_point() {
        let p = half_square(3);
        let cfg = MoreauOracleConfig::new(0.5);
        let x = Array2::zeros((1, 3));
        let y = Array2::zeros((1, 3));
        let w = LyapunovWeights::tracking(0.4, 0.05, 0.5);
        let snap = Snapshot { x: x.view(), y: y.view(), x_est: None, y_est: None };
        let v = lyapunov(&snap, &w, &p, &cfg).unwrap();
        // phi_lambda(0) = 0 for f = x^2 / 2
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        let cw = LyapunovWeights::compressed(0.5, 0.5, 0.3, 0.01, 0.5);
        assert!(matches!(lyapunov(&snap, &cw, &p, &cfg), Err(MetricsError::WeightMismatch { .. })));
    }

    #[test]
    fn lyapunov_term_by_term() {
        let p = half_square(2);
        let cfg = MoreauOracleConfig::new(0.5);
        let x = array![[1.0, 2.0]];
        let y = array![[0.5, -0.5]];
        let xe = array![[0.9, 2.5]];
        let ye = array![[0.0, 0.0]];
        let w = LyapunovWeights::Compressed([1.0, 2.0, 3.0, 4.0, 5.0]);
        let snap = Snapshot { x: x.view(), y: y.view(), x_est: Some(xe.view()), y_est: Some(ye.view()) };
        // phi_lambda(x) for f = x^2/2: x_hat = x / (1 + lambda), value = x^2 / (2 (1 + lambda))
        let env: f64 = [1.0f64, 2.0].iter().map(|v| v * v / (2.0 * 1.5)).sum();
        let expect = 1.0 * 0.5 + 2.0 * (0.01 + 0.25) + 3.0 * 0.5 + 4.0 * 0.5 + 5.0 * env;
        assert_abs_diff_eq!(lyapunov(&snap, &w, &p, &cfg).unwrap(), expect, epsilon = 1e-9);
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        let mut buf = Vec::new();
        write_records(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", CSV_HEADER.join(",")));
    }

    fn opt_f64() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![Just(None), any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(Some)]
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in proptest::collection::vec((any::<f64>().prop_filter("finite", |v| v.is_finite()), 0.0..1e6f64, opt_f64(), opt_f64(), opt_f64(), any::<u64>()), 0..8)) {
            let records: Vec<IterationRecord> = rows.iter().enumerate().map(|(t, r)| IterationRecord {
                t, objective: r.0, consensus_x: r.1, consensus_y: r.2, comp_err_x: r.3, comp_err_y: None,
                moreau_stat: r.4, stat_def2: r.4, stat_thm: r.2, lyapunov: r.3, bits_cum: r.5,
            }).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.csv");
            emit_csv(&records, &path).unwrap();
            prop_assert_eq!(read_csv(&path).unwrap(), records);
        }

        #[test]
        fn consensus_zero_iff_equal_columns(col in proptest::collection::vec(-5.0..5.0f64, 3), n in 1usize..6, bump in 1e-3..1.0f64) {
            let m = Array2::from_shape_fn((3, n), |(r, _)| col[r]);
            prop_assert!(consensus_error(m.view()) <= 1e-12);
            if n > 1 {
                let mut m2 = m.clone();
                m2[[0, n - 1]] += bump;
                prop_assert!(consensus_error(m2.view()) > 1e-12);
            }
        }
    }
}
