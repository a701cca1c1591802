//! Regularizers with closed-form proximal maps and the Moreau envelope of a
//! composite objective `phi = f + r`.

use ndarray::{Array1, ArrayView1, ArrayViewMut1, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProxError {
    #[error("envelope parameter lambda = {lambda} must satisfy 0 < lambda * L < 1 (L = {smoothness})")]
    BadLambda { lambda: f64, smoothness: f64 },
    #[error("inner proximal-gradient solve did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid regularizer: {0}")]
    InvalidRegularizer(String),
}

/// Closed convex regularizer `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regularizer {
    Zero,
    /// `mu * ||x||_1`
    L1 { mu: f64 },
    /// Indicator of `lo <= x <= hi`, coordinate-wise.
    #[serde(rename = "box")]
    BoxIndicator { lo: Vec<f64>, hi: Vec<f64> },
    /// `mu1 * ||x||_1 + (mu2 / 2) * ||x||^2`
    Elastic { mu1: f64, mu2: f64 },
}

impl Regularizer {
    pub fn l1(mu: f64) -> Self {
        Regularizer::L1 { mu }
    }

    /// Same bounds on every one of `d` coordinates.
    pub fn uniform_box(d: usize, lo: f64, hi: f64) -> Self {
        Regularizer::BoxIndicator { lo: vec![lo; d], hi: vec![hi; d] }
    }

    pub fn validate(&self, d: usize) -> Result<(), ProxError> {
        let bad = |m: String| Err(ProxError::InvalidRegularizer(m));
        match self {
            Regularizer::Zero => Ok(()),
            Regularizer::L1 { mu } if !(mu.is_finite() && *mu >= 0.0) => bad(format!("l1 weight {mu} must be >= 0")),
            Regularizer::L1 { .. } => Ok(()),
            Regularizer::Elastic { mu1, mu2 } if !(*mu1 >= 0.0 && *mu2 >= 0.0 && mu1.is_finite() && mu2.is_finite()) => {
                bad(format!("elastic weights ({mu1}, {mu2}) must be >= 0"))
            }
            Regularizer::Elastic { .. } => Ok(()),
            Regularizer::BoxIndicator { lo, hi } => {
                if lo.len() != d || hi.len() != d {
                    return bad(format!("box bounds have lengths {}/{}, expected {d}", lo.len(), hi.len()));
                }
                match lo.iter().zip(hi).position(|(l, h)| !(l <= h)) {
                    Some(j) => bad(format!("box coordinate {j} has lo {} > hi {}", lo[j], hi[j])),
                    None => Ok(()),
                }
            }
        }
    }

    /// `r(x)`; `+inf` outside the box for the indicator.
    pub fn value(&self, x: ArrayView1<f64>) -> f64 {
        match self {
            Regularizer::Zero => 0.0,
            Regularizer::L1 { mu } => mu * x.iter().map(|v| v.abs()).sum::<f64>(),
            Regularizer::Elastic { mu1, mu2 } => {
                mu1 * x.iter().map(|v| v.abs()).sum::<f64>() + 0.5 * mu2 * x.dot(&x)
            }
            Regularizer::BoxIndicator { lo, hi } => {
                let inside = x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| l <= v && v <= h);
                if inside {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `argmin_y r(y) + ||y - v||^2 / (2 step)`, written into `v`.
    pub fn prox_in_place(&self, step: f64, mut v: ArrayViewMut1<f64>) {
        if step == 0.0 {
            return;
        }
        match self {
            Regularizer::Zero => {}
            Regularizer::L1 { mu } => v.mapv_inplace(|t| soft_threshold(t, step * mu)),
            Regularizer::Elastic { mu1, mu2 } => {
                let shrink = 1.0 / (1.0 + step * mu2);
                v.mapv_inplace(|t| soft_threshold(t, step * mu1) * shrink)
            }
            Regularizer::BoxIndicator { lo, hi } => {
                Zip::from(&mut v).and(lo.as_slice()).and(hi.as_slice()).for_each(|t, &l, &h| *t = t.clamp(l, h));
            }
        }
    }

    pub fn prox(&self, step: f64, v: ArrayView1<f64>) -> Array1<f64> {
        let mut out = v.to_owned();
        self.prox_in_place(step, out.view_mut());
        out
    }
}

/// `sign(v) * max(|v| - threshold, 0)`
pub fn soft_threshold(v: f64, threshold: f64) -> f64 {
    if v > threshold {
        v - threshold
    } else if v < -threshold {
        v + threshold
    } else {
        0.0
    }
}

/// `phi = f + r` with an `L`-smooth `f` and a closed-form-prox `r`.
pub trait Composite {
    fn dim(&self) -> usize;
    fn smooth_value(&self, x: ArrayView1<f64>) -> f64;
    fn smooth_grad(&self, x: ArrayView1<f64>) -> Array1<f64>;
    /// Lipschitz constant of `grad f`.
    fn smoothness(&self) -> f64;
    fn regularizer(&self) -> &Regularizer;

    fn value(&self, x: ArrayView1<f64>) -> f64 {
        self.smooth_value(x) + self.regularizer().value(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoreauOracleConfig {
    pub lambda: f64,
    /// Inner step; `1 / (L + 1/lambda)` when unset.
    pub inner_step: Option<f64>,
    /// Gradient-mapping threshold; `1e-9 * max(1, ||x||)` when unset.
    pub inner_tol: Option<f64>,
    pub inner_max_iters: usize,
}

impl MoreauOracleConfig {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, inner_step: None, inner_tol: None, inner_max_iters: 100_000 }
    }

    pub fn check(&self, smoothness: f64) -> Result<(), ProxError> {
        let ok = self.lambda > 0.0 && self.lambda * smoothness < 1.0 && self.lambda.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ProxError::BadLambda { lambda: self.lambda, smoothness })
        }
    }
}

/// `prox_{lambda phi}(x)`, solved by proximal gradient descent on the
/// `(1/lambda - L)`-strongly convex subproblem, started at `x`.
pub fn prox_moreau<P: Composite + ?Sized>(
    problem: &P,
    cfg: &MoreauOracleConfig,
    x: ArrayView1<f64>,
) -> Result<Array1<f64>, ProxError> {
    let smoothness = problem.smoothness();
    cfg.check(smoothness)?;
    if x.len() != problem.dim() {
        return Err(ProxError::DimensionMismatch { expected: problem.dim(), got: x.len() });
    }
    let lambda = cfg.lambda;
    let step = cfg.inner_step.unwrap_or(1.0 / (smoothness + 1.0 / lambda));
    let tol = cfg.inner_tol.unwrap_or_else(|| 1e-9 * x.dot(&x).sqrt().max(1.0));
    let reg = problem.regularizer();

    let mut y = reg.prox(step, x);
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.inner_max_iters {
        let mut next = problem.smooth_grad(y.view());
        Zip::from(&mut next).and(&y).and(&x).for_each(|g, &yj, &xj| *g = yj - step * (*g + (yj - xj) / lambda));
        reg.prox_in_place(step, next.view_mut());
        residual = y.iter().zip(&next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / step;
        y = next;
        if residual <= tol {
            return Ok(y);
        }
    }
    Err(ProxError::NonConvergence { iterations: cfg.inner_max_iters, residual })
}

/// `grad phi_lambda(x) = (x - prox_{lambda phi}(x)) / lambda`
pub fn moreau_grad<P: Composite + ?Sized>(
    problem: &P,
    cfg: &MoreauOracleConfig,
    x: ArrayView1<f64>,
) -> Result<Array1<f64>, ProxError> {
    let x_hat = prox_moreau(problem, cfg, x)?;
    Ok((&x - &x_hat) / cfg.lambda)
}

/// `phi_lambda(x) = phi(x_hat) + ||x_hat - x||^2 / (2 lambda)`, together with `x_hat`.
pub fn moreau_envelope<P: Composite + ?Sized>(
    problem: &P,
    cfg: &MoreauOracleConfig,
    x: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>), ProxError> {
    let x_hat = prox_moreau(problem, cfg, x)?;
    let gap = &x_hat - &x;
    Ok((problem.value(x_hat.view()) + gap.dot(&gap) / (2.0 * cfg.lambda), x_hat))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// `f(y) = 0.5 * sum_j c_j (y_j - t_j)^2` plus a regularizer.
    pub struct Quadratic {
        pub curvature: Array1<f64>,
        pub target: Array1<f64>,
        pub reg: Regularizer,
    }

    impl Composite for Quadratic {
        fn dim(&self) -> usize {
            self.target.len()
        }
        fn smooth_value(&self, x: ArrayView1<f64>) -> f64 {
            0.5 * Zip::from(&x).and(&self.curvature).and(&self.target).fold(0.0, |acc, &v, &c, &t| acc + c * (v - t) * (v - t))
        }
        fn smooth_grad(&self, x: ArrayView1<f64>) -> Array1<f64> {
            Zip::from(&x).and(&self.curvature).and(&self.target).map_collect(|&v, &c, &t| c * (v - t))
        }
        fn smoothness(&self) -> f64 {
            self.curvature.iter().copied().fold(0.0, f64::max)
        }
        fn regularizer(&self) -> &Regularizer {
            &self.reg
        }
    }
}
