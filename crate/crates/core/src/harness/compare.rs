//! Side-by-side summaries of runs on a shared problem and topology.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::experiment::{Experiment, RunOutput};
use super::svg::{log_line_chart, Series};
use super::HarnessError;
use crate::metrics::IterationRecord;

/// Seed-averaged outcome of one contender.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub seeds: usize,
    pub final_stat: f64,
    pub best_stat: f64,
    /// Mean of the measured stationarity over `t < T`, the expected value
    /// at a uniformly sampled iterate.
    pub mean_stat: f64,
    pub final_consensus: f64,
    pub total_bits: f64,
}

/// Refuse experiments that do not share data, topology and seeds.
pub fn check_compatible(experiments: &[Experiment]) -> Result<(), HarnessError> {
    let Some(first) = experiments.first() else {
        return Err(HarnessError::Mismatch("nothing to compare".into()));
    };
    let fp = first.problem.fingerprint();
    for e in &experiments[1..] {
        let other = e.problem.fingerprint();
        if other != fp {
            return Err(HarnessError::Mismatch(format!("problem fingerprints differ: {fp} vs {other}")));
        }
        if e.mixing != first.mixing {
            return Err(HarnessError::Mismatch("mixing matrices differ".into()));
        }
        if e.config.run.seeds != first.config.run.seeds {
            return Err(HarnessError::Mismatch("seed lists differ".into()));
        }
    }
    let total: usize = experiments.iter().map(|e| e.contenders.len()).sum();
    if total < 2 {
        return Err(HarnessError::Mismatch("need at least two runs to compare".into()));
    }
    Ok(())
}

/// Give every contender a distinct label, suffixing clashes with the
/// config's name.
pub fn disambiguate(experiments: &mut [Experiment], names: &[String]) {
    let mut count: BTreeMap<String, usize> = BTreeMap::new();
    for e in experiments.iter() {
        for c in &e.contenders {
            *count.entry(c.label.clone()).or_default() += 1;
        }
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (e, name) in experiments.iter_mut().zip(names) {
        for c in &mut e.contenders {
            if count[&c.label] > 1 {
                let k = seen.entry(c.label.clone()).or_default();
                *k += 1;
                c.label = format!("{}-{}-{}", c.label, name, k);
            }
        }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}

/// Rows in first-appearance order of the labels.
pub fn summarize(runs: &[RunOutput]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.label.as_str()) {
            order.push(&r.label);
        }
    }
    order
        .into_iter()
        .map(|label| {
            let mine: Vec<&RunOutput> = runs.iter().filter(|r| r.label == label).collect();
            let last = |r: &&RunOutput| r.trajectory.records.last().cloned();
            SummaryRow {
                label: label.to_string(),
                seeds: mine.len(),
                final_stat: mean(mine.iter().filter_map(|r| r.trajectory.final_stationarity())),
                best_stat: mean(mine.iter().filter_map(|r| r.trajectory.best_stationarity())),
                mean_stat: mean(mine.iter().filter_map(|r| r.trajectory.mean_stationarity())),
                final_consensus: mean(mine.iter().filter_map(last).map(|rec| rec.consensus_x)),
                total_bits: mean(mine.iter().filter_map(last).map(|rec| rec.bits_cum as f64)),
            }
        })
        .collect()
}

pub fn format_table(rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(9);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>5}  {:>12}  {:>12}  {:>12}  {:>15}  {:>14}",
        "algorithm", "seeds", "final_stat", "best_stat", "mean_stat", "final_consensus", "total_bits"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>12.4e}  {:>12.4e}  {:>12.4e}  {:>15.4e}  {:>14.4e}",
            r.label, r.seeds, r.final_stat, r.best_stat, r.mean_stat, r.final_consensus, r.total_bits
        );
    }
    out
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<(), HarnessError> {
    let io = |e: csv::Error| HarnessError::Io { path: path.display().to_string(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Seed-averaged `(t, bits, value)` over the snapshots where `field` was
/// measured in every seed.
fn averaged(runs: &[&RunOutput], field: fn(&IterationRecord) -> Option<f64>) -> Vec<(f64, f64, f64)> {
    let Some(first) = runs.first() else { return Vec::new() };
    let mut out = Vec::new();
    for (k, rec) in first.trajectory.records.iter().enumerate() {
        let vals: Option<Vec<(f64, f64)>> = runs
            .iter()
            .map(|r| r.trajectory.records.get(k).and_then(|x| field(x).map(|v| (x.bits_cum as f64, v))))
            .collect();
        if let Some(vals) = vals {
            let n = vals.len() as f64;
            let bits = vals.iter().map(|v| v.0).sum::<f64>() / n;
            let v = vals.iter().map(|v| v.1).sum::<f64>() / n;
            out.push((rec.t as f64, bits, v));
        }
    }
    out
}

/// Stationarity and consensus charts against iterations and bits.
pub fn charts(runs: &[RunOutput]) -> Vec<(String, String)> {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let metrics: [(&str, &str, fn(&IterationRecord) -> Option<f64>); 2] = [
        ("stationarity", "stat_def2", |r| r.stat_def2),
        ("consensus", "consensus_x", |r| Some(r.consensus_x)),
    ];
    let mut out = Vec::new();
    for (name, y_label, field) in metrics {
        let curves: Vec<(String, Vec<(f64, f64, f64)>)> = labels
            .iter()
            .map(|&l| {
                let mine: Vec<&RunOutput> = runs.iter().filter(|r| r.label == l).collect();
                (l.to_string(), averaged(&mine, field))
            })
            .collect();
        for (axis, pick) in [("iteration", 0usize), ("bits", 1usize)] {
            let series: Vec<Series> = curves
                .iter()
                .map(|(l, pts)| Series {
                    label: l.clone(),
                    points: pts.iter().map(|&(t, b, v)| (if pick == 0 { t } else { b }, v)).collect(),
                })
                .collect();
            let title = format!("{y_label} vs {axis} (mean over seeds)");
            out.push((format!("{name}_vs_{axis}.svg"), log_line_chart(&title, axis, y_label, &series)));
        }
    }
    out
}

pub fn write_charts(runs: &[RunOutput], out: &Path) -> Result<Vec<std::path::PathBuf>, HarnessError> {
    let mut paths = Vec::new();
    for (name, svg) in charts(runs) {
        let path = out.join(name);
        std::fs::write(&path, svg).map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })?;
        paths.push(path);
    }
    Ok(paths)
}
