//! Invariant suite for mixing matrices and compressors.

use std::f64::consts::PI;
use std::path::PathBuf;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::compressors::Compressor;
use crate::topology::{
    build_complete, build_custom, build_ring, build_torus2d, read_matrix, spectral_rho, stochastic_deviation, Graph,
    MixingMatrix, TopologyError, WeightScheme, STOCHASTIC_TOL,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyOptions {
    /// Extra matrix file to certify (e.g. a deliberately broken one).
    pub matrix: Option<PathBuf>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { matrix: None, trials: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertifyReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn check(name: impl Into<String>, passed: bool, detail: Value) -> Check {
    Check { name: name.into(), passed, detail }
}

fn matrix_check(name: String, built: Result<MixingMatrix, TopologyError>) -> Check {
    match built {
        Ok(m) => {
            let dev = m.max_stochastic_deviation();
            check(name, dev <= STOCHASTIC_TOL && m.rho() < 1.0, json!({ "n": m.n(), "max_deviation": dev, "rho": m.rho() }))
        }
        Err(e) => check(name, false, json!({ "error": e.to_string() })),
    }
}

/// `max_{k != 0} |1/3 + (2/3) cos(2 pi k / n)|`, the ring's circulant spectrum.
pub fn ring_rho_oracle(n: usize) -> f64 {
    (1..n).map(|k| (1.0 + 2.0 * (2.0 * PI * k as f64 / n as f64).cos()).abs() / 3.0).fold(0.0, f64::max)
}

fn topology_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for n in [2, 3, 5, 8, 16, 32, 64] {
        for scheme in [WeightScheme::Uniform, WeightScheme::Metropolis] {
            out.push(matrix_check(format!("ring({n}, {scheme})"), build_ring(n, scheme)));
        }
    }
    for n in [1, 2, 5, 16] {
        out.push(matrix_check(format!("complete({n})"), build_complete(n)));
    }
    for (r, c) in [(3, 3), (4, 5), (8, 8)] {
        out.push(matrix_check(format!("torus2d({r}x{c})"), build_torus2d(r, c)));
    }
    for (name, g) in [("star(6)", Graph::star(6)), ("path(6)", Graph::path(6))] {
        for scheme in [WeightScheme::Uniform, WeightScheme::Metropolis] {
            out.push(matrix_check(format!("custom {name} {scheme}"), build_custom(&g, scheme)));
        }
    }

    let oracle = ring_rho_oracle(5);
    match build_ring(5, WeightScheme::Uniform) {
        Ok(w) => out.push(check(
            "ring(5, uniform-1/3) rho vs circulant spectrum",
            (w.rho() - oracle).abs() <= 1e-10,
            json!({ "rho": w.rho(), "oracle": oracle }),
        )),
        Err(e) => out.push(check("ring(5, uniform-1/3) rho vs circulant spectrum", false, json!({ "error": e.to_string() }))),
    }

    let scaled: Vec<(usize, f64)> = [8usize, 16, 32, 64]
        .iter()
        .filter_map(|&n| build_ring(n, WeightScheme::Uniform).ok().map(|w| (n, (1.0 - w.rho()) * (n * n) as f64)))
        .collect();
    let vals: Vec<f64> = scaled.iter().map(|s| s.1).collect();
    let (lo, hi) = (vals.iter().copied().fold(f64::INFINITY, f64::min), vals.iter().copied().fold(0.0, f64::max));
    out.push(check(
        "ring gap scaling (1 - rho) n^2 within factor 4",
        vals.len() == 4 && hi <= 4.0 * lo,
        json!({ "values": scaled.iter().map(|(n, v)| json!({ "n": n, "scaled_gap": v })).collect::<Vec<_>>() }),
    ));

    if let Ok(w) = build_ring(8, WeightScheme::Uniform) {
        let damped: Vec<(f64, Option<f64>)> = [0.1, 0.5, 0.8, 1.0].iter().map(|&g| (g, w.damped(g).ok().map(|m| m.rho()))).collect();
        out.push(check(
            "damped ring(8) contracts for gamma in (0, 1]",
            damped.iter().all(|(_, r)| r.is_some_and(|r| r < 1.0)),
            json!(damped.iter().map(|(g, r)| json!({ "gamma": g, "rho_hat": r })).collect::<Vec<_>>()),
        ));
    }
    out
}

fn compressor_checks(opts: &CertifyOptions) -> Vec<Check> {
    let kinds = [
        Compressor::Identity,
        Compressor::TopK { ratio: 0.3 },
        Compressor::RandK { ratio: 0.3 },
        Compressor::Qsgd { s: 4 },
    ];
    let mut out = Vec::new();
    for (k, q) in kinds.iter().enumerate() {
        for (j, d) in [4usize, 16, 128].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream((k * 8 + j) as u64);
            let name = format!("certify_alpha {q} d={d}");
            match q.certify_alpha(d, opts.trials, &mut rng) {
                Ok(c) => out.push(check(
                    name,
                    true,
                    json!({ "alpha_sq": c.alpha_sq, "measured": c.measured, "std_err": c.std_err, "bound": c.bound, "trials": opts.trials }),
                )),
                Err(e) => out.push(check(name, false, json!({ "error": e.to_string() }))),
            }
        }
    }
    for d in [4usize, 16, 128] {
        let q = Compressor::TopK { ratio: 0.3 };
        let k = Compressor::keep_count(0.3, d);
        let x = Array1::from_elem(d, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let (y, _) = q.compress(x.view(), &mut rng);
        let ratio = (&x - &y).mapv(|v| v * v).sum() / d as f64;
        let bound = 1.0 - k as f64 / d as f64;
        out.push(check(
            format!("topk(0.3) worst case d={d}"),
            ratio == bound && ratio <= q.alpha_sq(d),
            json!({ "ratio": ratio, "one_minus_k_over_d": bound, "k": k }),
        ));
    }
    out
}

fn external_matrix_check(path: &PathBuf) -> Check {
    let name = format!("matrix {}", path.display());
    let w = match read_matrix(path) {
        Ok(w) => w,
        Err(e) => return check(name, false, json!({ "error": e.to_string() })),
    };
    let dev = stochastic_deviation(w.view());
    let nonneg = w.iter().all(|v| v.is_finite() && *v >= 0.0);
    let rho = if dev <= STOCHASTIC_TOL { spectral_rho(w.view()).ok() } else { None };
    let passed = nonneg && dev <= STOCHASTIC_TOL && rho.is_some_and(|r| r < 1.0);
    check(name, passed, json!({ "n": w.nrows(), "nonnegative": nonneg, "max_deviation": dev, "rho": rho }))
}

pub fn certify(opts: &CertifyOptions) -> CertifyReport {
    let mut checks = topology_checks();
    checks.extend(compressor_checks(opts));
    if let Some(path) = &opts.matrix {
        checks.push(external_matrix_check(path));
    }
    CertifyReport { passed: checks.iter().all(|c| c.passed), checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_oracle_matches_known_value() {
        // n = 5: max(|1 + 2 cos(2 pi / 5)|, |1 + 2 cos(4 pi / 5)|) / 3
        let expect = ((1.0 + 2.0 * (4.0 * PI / 5.0).cos()).abs()).max(1.0 + 2.0 * (2.0 * PI / 5.0).cos()) / 3.0;
        assert!((ring_rho_oracle(5) - expect).abs() < 1e-15);
    }

    #[test]
    fn default_suite_passes() {
        let report = certify(&CertifyOptions { trials: 2000, ..Default::default() });
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert!(report.passed, "{failed:?}");
    }

    #[test]
    fn bad_matrix_fails_with_deviation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "0.45 0.45\n0.45 0.45\n").unwrap();
        let c = external_matrix_check(&path);
        assert!(!c.passed);
        assert!((c.detail["max_deviation"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    }
}
