//! Contractive compressors `Q` with `E||x - Q[x]||^2 <= alpha^2 ||x||^2`.
//!
//! Every compressor produces an explicit [`CompressedMessage`]; the
//! compressed vector handed back to the simulator is always the decoded
//! message, so what the receiver sees is exactly what was accounted for.

use std::fmt;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const FLOAT_BITS: u64 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressorError {
    #[error("{0}: ratio must lie in (0, 1]")]
    BadRatio(String),
    #[error("qsgd needs at least one level, got s = {0}")]
    BadLevels(u32),
    #[error("certification needs at least 1000 trials, got {0}")]
    TooFewTrials(usize),
    #[error("{kind} failed contraction certification at d = {dim}: measured {measured} > bound {bound} (alpha^2 = {alpha_sq})")]
    CertificationFailed { kind: String, dim: usize, measured: f64, bound: f64, alpha_sq: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Compressor {
    Identity,
    /// Keep the `ceil(ratio d)` largest-magnitude entries.
    TopK { ratio: f64 },
    /// Keep `ceil(ratio d)` entries chosen uniformly without replacement.
    RandK { ratio: f64 },
    /// Rescaled stochastic quantization with `s` levels.
    #[serde(alias = "qsgd-rescaled")]
    Qsgd { s: u32 },
}

impl fmt::Display for Compressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Compressor::Identity => f.write_str("identity"),
            Compressor::TopK { ratio } => write!(f, "topk({ratio})"),
            Compressor::RandK { ratio } => write!(f, "randk({ratio})"),
            Compressor::Qsgd { s } => write!(f, "qsgd({s})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Vec<f64>),
    Sparse { indices: Vec<u32>, values: Vec<f64> },
    /// Entry `j` decodes to `sign_j * scale * level_j` with
    /// `scale = ||x|| / (s tau)`.
    Quantized { scale: f64, negative: Vec<bool>, levels: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    pub dim: usize,
    pub payload: Payload,
    pub bit_cost: u64,
}

impl CompressedMessage {
    pub fn decode(&self) -> Array1<f64> {
        match &self.payload {
            Payload::Dense(v) => Array1::from(v.clone()),
            Payload::Sparse { indices, values } => {
                let mut out = Array1::zeros(self.dim);
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
                out
            }
            Payload::Quantized { scale, negative, levels } => negative
                .iter()
                .zip(levels)
                .map(|(&neg, &lvl)| quantized_value(*scale, neg, lvl))
                .collect(),
        }
    }
}

fn quantized_value(scale: f64, negative: bool, level: u32) -> f64 {
    let v = scale * level as f64;
    if negative {
        -v
    } else {
        v
    }
}

/// `ceil(log2 d)` for `d >= 1`.
fn index_bits(d: usize) -> u64 {
    (usize::BITS - (d.max(1) - 1).leading_zeros()) as u64
}

impl Compressor {
    pub fn validate(&self) -> Result<(), CompressorError> {
        match *self {
            Compressor::TopK { ratio } | Compressor::RandK { ratio } if !(ratio > 0.0 && ratio <= 1.0) => {
                Err(CompressorError::BadRatio(self.to_string()))
            }
            Compressor::Qsgd { s } if s == 0 => Err(CompressorError::BadLevels(s)),
            _ => Ok(()),
        }
    }

    pub fn is_randomized(&self) -> bool {
        matches!(self, Compressor::RandK { .. } | Compressor::Qsgd { .. })
    }

    /// Entries kept by the sparsifiers: `ceil(ratio d)`, clamped to `[1, d]`.
    /// Products within 1e-9 of an integer are not rounded up, so 30% of 10
    /// is 3 despite `0.3 * 10.0 > 3.0` in floating point.
    pub fn keep_count(ratio: f64, d: usize) -> usize {
        let prod = ratio * d as f64;
        let k = if (prod - prod.round()).abs() < 1e-9 { prod.round() } else { prod.ceil() };
        (k as usize).clamp(1, d.max(1))
    }

    fn qsgd_tau(s: u32, d: usize) -> f64 {
        let (s, d) = (s as f64, d as f64);
        1.0 + (d / (s * s)).min(d.sqrt() / s)
    }

    /// Certified contraction factor `alpha^2` on dimension `d`.
    pub fn alpha_sq(&self, d: usize) -> f64 {
        match *self {
            Compressor::Identity => 0.0,
            Compressor::TopK { ratio } | Compressor::RandK { ratio } => {
                1.0 - Self::keep_count(ratio, d) as f64 / d as f64
            }
            Compressor::Qsgd { s } => 1.0 - 1.0 / Self::qsgd_tau(s, d),
        }
    }

    /// Accounted message size in bits for one `d`-vector.
    pub fn bit_cost(&self, d: usize) -> u64 {
        let d64 = d as u64;
        match *self {
            Compressor::Identity => FLOAT_BITS * d64,
            Compressor::TopK { ratio } | Compressor::RandK { ratio } => {
                Self::keep_count(ratio, d) as u64 * (FLOAT_BITS + index_bits(d))
            }
            Compressor::Qsgd { s } => FLOAT_BITS + d64 * (1 + index_bits(s as usize + 1)),
        }
    }

    /// Returns `Q[x]` and the message that encodes it. Deterministic kinds
    /// never touch `rng`.
    pub fn compress<R: Rng + ?Sized>(&self, x: ArrayView1<f64>, rng: &mut R) -> (Array1<f64>, CompressedMessage) {
        let d = x.len();
        let payload = match *self {
            Compressor::Identity => Payload::Dense(x.to_vec()),
            Compressor::TopK { ratio } => {
                let k = Self::keep_count(ratio, d);
                let mut order: Vec<u32> = (0..d as u32).collect();
                // magnitude descending, then lower index first
                let cmp = |a: &u32, b: &u32| {
                    x[*b as usize].abs().total_cmp(&x[*a as usize].abs()).then(a.cmp(b))
                };
                if k < d {
                    order.select_nth_unstable_by(k, cmp);
                }
                let mut indices = order[..k].to_vec();
                indices.sort_unstable();
                let values = indices.iter().map(|&i| x[i as usize]).collect();
                Payload::Sparse { indices, values }
            }
            Compressor::RandK { ratio } => {
                let k = Self::keep_count(ratio, d);
                let mut indices: Vec<u32> =
                    rand::seq::index::sample(rng, d, k).into_iter().map(|i| i as u32).collect();
                indices.sort_unstable();
                let values = indices.iter().map(|&i| x[i as usize]).collect();
                Payload::Sparse { indices, values }
            }
            Compressor::Qsgd { s } => {
                let norm = x.dot(&x).sqrt();
                let tau = Self::qsgd_tau(s, d);
                let sf = s as f64;
                let mut negative = Vec::with_capacity(d);
                let mut levels = Vec::with_capacity(d);
                for &v in x.iter() {
                    let xi: f64 = rng.random();
                    let level = if norm > 0.0 { (sf * v.abs() / norm + xi).floor() as u32 } else { 0 };
                    negative.push(v < 0.0);
                    levels.push(level);
                }
                Payload::Quantized { scale: norm / (sf * tau), negative, levels }
            }
        };
        let msg = CompressedMessage { dim: d, payload, bit_cost: self.bit_cost(d) };
        (msg.decode(), msg)
    }

    /// Empirical check of the contraction factor over random unit vectors.
    ///
    /// Deterministic kinds must satisfy the bound on every trial (the max
    /// ratio is reported); randomized kinds must have a mean ratio within
    /// three standard errors of `alpha^2`.
    pub fn certify_alpha<R: Rng + ?Sized>(&self, d: usize, trials: usize, rng: &mut R) -> Result<Certificate, CompressorError> {
        if trials < 1000 {
            return Err(CompressorError::TooFewTrials(trials));
        }
        let alpha_sq = self.alpha_sq(d);
        let mut ratios = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut x: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = x.dot(&x).sqrt();
            x /= norm;
            let (q, _) = self.compress(x.view(), rng);
            let r = &x - &q;
            ratios.push(r.dot(&r));
        }
        let (measured, std_err, bound) = if self.is_randomized() {
            let mean = ratios.iter().sum::<f64>() / trials as f64;
            let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (trials - 1) as f64;
            let se = (var / trials as f64).sqrt();
            (mean, se, alpha_sq + 3.0 * se)
        } else {
            let max = ratios.iter().copied().fold(0.0, f64::max);
            (max, 0.0, alpha_sq + 1e-12)
        };
        let cert = Certificate { dim: d, trials, alpha_sq, measured, std_err, bound };
        if measured <= bound {
            Ok(cert)
        } else {
            Err(CompressorError::CertificationFailed { kind: self.to_string(), dim: d, measured, bound, alpha_sq })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certificate {
    pub dim: usize,
    pub trials: usize,
    pub alpha_sq: f64,
    pub measured: f64,
    pub std_err: f64,
    pub bound: f64,
}
