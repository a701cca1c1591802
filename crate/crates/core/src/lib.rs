//! Decentralized proximal stochastic gradient tracking on simulated networks.
//!
//! The crate simulates `n` workers that jointly minimize
//! `phi(x) = (1/n) sum_i f_i(x) + r(x)`, each holding only its own `f_i`
//! and talking to graph neighbors through a doubly stochastic mixing matrix.
//!
//! - [`topology`]: graphs, mixing matrices and their contraction factor.
//! - [`proxops`]: regularizers, proximal maps, the Moreau envelope oracle.
//! - [`compressors`]: contractive compressors with bit accounting.
//! - [`problems`]: synthetic heterogeneous least-squares / logistic problems.
//! - [`algorithms`]: the tracking methods (plain and compressed) and a
//!   no-tracking baseline, plus step-size presets and the run loop.
//! - [`metrics`]: stationarity, consensus and Lyapunov diagnostics, CSV output.
//! - [`harness`]: config files, experiment orchestration, the CLI commands.

pub mod algorithms;
pub mod compressors;
pub mod harness;
pub mod metrics;
pub mod problems;
pub mod proxops;
pub mod rng;
pub mod topology;
