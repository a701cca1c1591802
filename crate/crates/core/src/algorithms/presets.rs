//! Step-size recipes.
//!
//! `thm1` and `thm2` reproduce the parameter conditions of the convergence
//! theorems for the uncompressed and compressed methods. Their constants
//! make steps tiny at desk scale, so `practical` is the default for demos.

use serde::{Deserialize, Serialize};

use super::{AlgoError, AlgorithmId};
use crate::compressors::Compressor;
use crate::metrics::LyapunovWeights;
use crate::topology::MixingMatrix;

/// `eta * L` of the practical preset.
pub const PRACTICAL_STEP_SCALE: f64 = 0.1;
/// Compression mixing step of the practical preset.
pub const PRACTICAL_GAMMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Thm1,
    Thm2,
    #[default]
    Practical,
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Thm1 => "thm1",
            Preset::Thm2 => "thm2",
            Preset::Practical => "practical",
        })
    }
}

/// User-supplied values. Under the theorem presets they act as upper
/// bounds (the recipe caps them); under `practical` they replace the default.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepOverrides {
    pub eta: Option<f64>,
    pub gamma_x: Option<f64>,
    pub gamma_y: Option<f64>,
    /// Envelope parameter of the stationarity metric.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedParams {
    pub preset: Preset,
    pub eta: f64,
    pub gamma_x: f64,
    pub gamma_y: f64,
    pub lambda: f64,
    pub smoothness: f64,
    pub rho: f64,
    pub rho_hat_x: f64,
    pub rho_hat_y: f64,
    /// Larger of the two compressors' certified factors.
    pub alpha_sq: f64,
}

impl ResolvedParams {
    pub fn lyapunov_weights(&self, algo: AlgorithmId) -> Option<LyapunovWeights> {
        match algo {
            AlgorithmId::DProxSgt => Some(LyapunovWeights::tracking(self.rho, self.eta, self.lambda)),
            AlgorithmId::CDProxSgt | AlgorithmId::CDProxSgtReference => Some(LyapunovWeights::compressed(
                self.rho_hat_x,
                self.rho_hat_y,
                self.alpha_sq,
                self.eta,
                self.lambda,
            )),
            AlgorithmId::DProxSgdBaseline => None,
        }
    }
}

fn damped_rho(mixing: &MixingMatrix, gamma: f64) -> Result<f64, AlgoError> {
    mixing
        .damped(gamma)
        .map(|m| m.rho())
        .map_err(|e| AlgoError::InvalidConfig(format!("damped mixing matrix: {e}")))
}

impl Preset {
    pub fn resolve(
        self,
        algo: AlgorithmId,
        smoothness: f64,
        mixing: &MixingMatrix,
        compressors: (Compressor, Compressor),
        d: usize,
        overrides: &StepOverrides,
    ) -> Result<ResolvedParams, AlgoError> {
        let l = smoothness;
        if !(l > 0.0 && l.is_finite()) {
            return Err(AlgoError::InvalidConfig(format!("presets need a smoothness constant L > 0, got {l}")));
        }
        let rho = mixing.rho();
        let alpha_sq = compressors.0.alpha_sq(d).max(compressors.1.alpha_sq(d));
        let default_gamma = if algo.is_compressed() { PRACTICAL_GAMMA } else { 1.0 };
        let cap = |v: f64, user: Option<f64>| user.map_or(v, |u| u.min(v));

        let (eta, gamma_x, gamma_y, lambda) = match self {
            Preset::Practical => (
                overrides.eta.unwrap_or(PRACTICAL_STEP_SCALE / l),
                overrides.gamma_x.unwrap_or(default_gamma),
                overrides.gamma_y.unwrap_or(default_gamma),
                1.0 / (4.0 * l),
            ),
            Preset::Thm1 => {
                // rho = 0 makes the second terms infinite, leaving 1/(4L)
                let lambda = (1.0 / (4.0 * l)).min(1.0 / (96.0 * rho * l));
                let eta_max = (1.0 / (4.0 * l)).min((1.0 - rho * rho).powi(4) / (96.0 * rho * l));
                (cap(eta_max, overrides.eta), overrides.gamma_x.unwrap_or(1.0), overrides.gamma_y.unwrap_or(1.0), lambda)
            }
            Preset::Thm2 => {
                // The gamma bounds depend on rho_hat(gamma) and cannot all hold
                // at once, so rho_hat is evaluated at the starting gammas and
                // each bound is applied in a single pass.
                let gx0 = overrides.gamma_x.unwrap_or(1.0);
                let gy0 = overrides.gamma_y.unwrap_or(1.0);
                let hx = 1.0 - damped_rho(mixing, gx0)?.powi(2);
                let hy = 1.0 - damped_rho(mixing, gy0)?.powi(2);
                let contraction = 1.0 - alpha_sq;
                let lambda = (1.0 / (4.0 * l)).min(contraction * contraction / (9.0 * l + 41280.0));
                let eta_max = lambda.min(contraction.powi(2) * hx * hx * hy * hy / (18830.0 * l.max(1.0)));
                let eta = cap(eta_max, overrides.eta);
                let alpha = alpha_sq.sqrt();
                // alpha = 0 puts no constraint through eta / alpha
                let gx_max = if alpha > 0.0 { (contraction / 25.0).min(eta / alpha) } else { contraction / 25.0 };
                let gy_max = contraction * hx * hy / 317.0;
                (eta, gx0.min(gx_max), gy0.min(gy_max), lambda)
            }
        };
        let lambda = overrides.lambda.unwrap_or(lambda);
        Ok(ResolvedParams {
            preset: self,
            eta,
            gamma_x,
            gamma_y,
            lambda,
            smoothness: l,
            rho,
            rho_hat_x: damped_rho(mixing, gamma_x)?,
            rho_hat_y: damped_rho(mixing, gamma_y)?,
            alpha_sq,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_complete, build_ring, WeightScheme};
    use approx::assert_relative_eq;

    #[test]
    fn thm1_ring() {
        let w = build_ring(5, WeightScheme::Uniform).unwrap();
        let rho = w.rho();
        let p = Preset::Thm1
            .resolve(AlgorithmId::DProxSgt, 2.0, &w, (Compressor::Identity, Compressor::Identity), 10, &StepOverrides::default())
            .unwrap();
        assert_relative_eq!(p.lambda, 1.0 / (96.0 * rho * 2.0), max_relative = 1e-15);
        assert_relative_eq!(p.eta, (1.0 - rho * rho).powi(4) / (96.0 * rho * 2.0), max_relative = 1e-15);
        assert!(p.eta <= p.lambda && p.lambda <= 1.0 / 8.0);
        let capped = Preset::Thm1
            .resolve(AlgorithmId::DProxSgt, 2.0, &w, (Compressor::Identity, Compressor::Identity), 10, &StepOverrides { eta: Some(1e-6), ..Default::default() })
            .unwrap();
        assert_eq!(capped.eta, 1e-6);
    }

    #[test]
    fn thm1_complete_graph() {
        let w = build_complete(4).unwrap();
        let p = Preset::Thm1
            .resolve(AlgorithmId::DProxSgt, 4.0, &w, (Compressor::Identity, Compressor::Identity), 3, &StepOverrides::default())
            .unwrap();
        assert_eq!(p.lambda, 1.0 / 16.0);
        assert_eq!(p.eta, 1.0 / 16.0);
    }

    #[test]
    fn thm2_caps() {
        let w = build_ring(5, WeightScheme::Uniform).unwrap();
        let topk = Compressor::TopK { ratio: 0.3 };
        let p = Preset::Thm2
            .resolve(AlgorithmId::CDProxSgt, 1.0, &w, (topk, topk), 10, &StepOverrides::default())
            .unwrap();
        let a2 = 0.7;
        assert_relative_eq!(p.alpha_sq, a2, max_relative = 1e-12);
        assert_relative_eq!(p.lambda, (1.0 - a2) * (1.0 - a2) / (9.0 + 41280.0), max_relative = 1e-12);
        assert!(p.eta <= p.lambda);
        assert!(p.gamma_x <= (1.0 - a2) / 25.0 + 1e-15);
        assert!(p.gamma_x <= p.eta / a2.sqrt() + 1e-15);
        assert!(p.gamma_y > 0.0 && p.gamma_y < 1e-3);
        // identity compressor: no eta / alpha term
        let id = Preset::Thm2
            .resolve(AlgorithmId::CDProxSgt, 1.0, &w, (Compressor::Identity, Compressor::Identity), 10, &StepOverrides::default())
            .unwrap();
        assert_relative_eq!(id.gamma_x, 1.0 / 25.0, max_relative = 1e-15);
    }

    #[test]
    fn practical_defaults() {
        let w = build_ring(5, WeightScheme::Uniform).unwrap();
        let topk = Compressor::TopK { ratio: 0.3 };
        let p = Preset::Practical.resolve(AlgorithmId::CDProxSgt, 2.0, &w, (topk, topk), 10, &StepOverrides::default()).unwrap();
        assert_eq!(p.eta, PRACTICAL_STEP_SCALE / 2.0);
        assert_eq!((p.gamma_x, p.gamma_y), (PRACTICAL_GAMMA, PRACTICAL_GAMMA));
        assert_eq!(p.lambda, 1.0 / 8.0);
        assert!(p.rho_hat_x < 1.0 && p.rho_hat_x > w.rho());
        let p = Preset::Practical
            .resolve(AlgorithmId::DProxSgt, 2.0, &w, (Compressor::Identity, Compressor::Identity), 10, &StepOverrides { eta: Some(0.05), ..Default::default() })
            .unwrap();
        assert_eq!((p.eta, p.gamma_x), (0.05, 1.0));
    }
}
