//! Assembling a validated config into runnable pieces and executing it.

use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::config::{ConfigError, ExperimentConfig, TopologyKind};
use super::HarnessError;
use crate::algorithms::{run, AlgoConfig, AlgorithmId, MetricsHooks, ResolvedParams, Trajectory};
use crate::metrics::{emit_csv, write_metadata};
use crate::problems::{make_heterogeneous, CompositeProblem};
use crate::proxops::{Composite, MoreauOracleConfig};
use crate::rng::{Purpose, StreamFactory};
use crate::topology::{build_complete, build_custom, build_ring, build_torus2d, read_matrix, Graph, MixingMatrix};

/// One algorithm of an experiment with its resolved hyperparameters.
#[derive(Debug, Clone)]
pub struct Contender {
    pub label: String,
    pub algo: AlgorithmId,
    pub params: ResolvedParams,
    pub cfg: AlgoConfig,
    pub hooks: MetricsHooks,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: CompositeProblem,
    pub mixing: MixingMatrix,
    pub contenders: Vec<Contender>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub label: String,
    pub seed: u64,
    pub trajectory: Trajectory,
}

fn build_problem(config: &ExperimentConfig) -> Result<CompositeProblem, ConfigError> {
    let block = &config.problem;
    let problem = match (&block.dataset, block.spec()) {
        (Some(path), _) => CompositeProblem::read_csv(path, block.loss, block.reg.clone())
            .map_err(|e| ConfigError::new("problem.dataset", e.to_string()))?,
        (None, Some(spec)) => make_heterogeneous(&spec).map_err(|e| ConfigError::new("problem", e.to_string()))?,
        (None, None) => unreachable!("spec() is Some without a dataset"),
    };
    if problem.n_workers() != block.workers {
        return Err(ConfigError::new(
            "problem.workers",
            format!("is {} but the dataset has {} workers", block.workers, problem.n_workers()),
        ));
    }
    Ok(problem)
}

fn build_mixing(config: &ExperimentConfig) -> Result<MixingMatrix, ConfigError> {
    let t = &config.topology;
    let n = config.problem.workers;
    let err = |key: &'static str| move |e: crate::topology::TopologyError| ConfigError::new(key, e.to_string());
    let mixing = match t.kind {
        TopologyKind::Ring => build_ring(n, t.scheme).map_err(err("topology"))?,
        TopologyKind::Complete => build_complete(n).map_err(err("topology"))?,
        TopologyKind::Torus2d => {
            build_torus2d(t.rows.unwrap_or(0), t.cols.unwrap_or(0)).map_err(err("topology"))?
        }
        TopologyKind::Custom => {
            let path = t.path.as_deref().expect("validated");
            let graph = Graph::read_edge_list(path, Some(n)).map_err(err("topology.path"))?;
            build_custom(&graph, t.scheme).map_err(err("topology.path"))?
        }
        TopologyKind::Matrix => {
            let path = t.path.as_deref().expect("validated");
            MixingMatrix::from_matrix(read_matrix(path).map_err(err("topology.path"))?).map_err(err("topology.path"))?
        }
    };
    if mixing.n() != n {
        return Err(ConfigError::new(
            "topology",
            format!("has {} nodes but problem.workers = {n}", mixing.n()),
        ));
    }
    Ok(mixing)
}

impl Experiment {
    /// Build the problem, topology and every contender. Any inconsistency is
    /// reported here, before anything runs.
    pub fn prepare(config: ExperimentConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let problem = build_problem(&config)?;
        let mixing = build_mixing(&config)?;
        let l = problem.smoothness();
        let a = &config.algorithm;
        let (qx, qy) = a.compressors();
        let mut contenders = Vec::new();
        for algo in config.algorithms() {
            let params = a
                .preset
                .resolve(algo, l, &mixing, (qx, qy), problem.dim(), &a.overrides())
                .map_err(|e| ConfigError::new("algorithm.preset", e.to_string()))?;
            let moreau = MoreauOracleConfig {
                inner_tol: config.run.inner_tol,
                inner_max_iters: config.run.inner_max_iters,
                ..MoreauOracleConfig::new(params.lambda)
            };
            moreau.check(l).map_err(|e| ConfigError::new("algorithm.lambda", e.to_string()))?;
            let cfg = AlgoConfig {
                eta: params.eta,
                gamma_x: params.gamma_x,
                gamma_y: params.gamma_y,
                batch: a.batch,
                iters: config.run.iters,
                compressor_x: qx,
                compressor_y: qy,
            };
            cfg.validate().map_err(|e| ConfigError::new("algorithm", e.to_string()))?;
            let hooks = MetricsHooks { moreau, cadence: config.run.cadence, lyapunov: params.lyapunov_weights(algo) };
            let label = a.label.clone().unwrap_or_else(|| algo.name().to_string());
            contenders.push(Contender { label, algo, params, cfg, hooks });
        }
        Ok(Self { config, problem, mixing, contenders })
    }

    /// Common starting point of every worker for `seed`.
    pub fn x0(&self, seed: u64) -> Array1<f64> {
        let scale = self.config.run.init_scale;
        if scale == 0.0 {
            return Array1::zeros(self.problem.dim());
        }
        let mut rng = StreamFactory::new(seed).stream(Purpose::Init, 0, 0);
        (0..self.problem.dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect()
    }

    pub fn run_one(&self, contender: &Contender, seed: u64) -> Result<RunOutput, HarnessError> {
        let x0 = self.x0(seed);
        let trajectory = run(contender.algo, &self.problem, &self.mixing, &contender.cfg, Some(x0.view()), seed, &contender.hooks)
            .map_err(|source| HarnessError::Run { label: contender.label.clone(), seed, source })?;
        Ok(RunOutput { label: contender.label.clone(), seed, trajectory })
    }

    /// Every (contender, seed) pair, in config order. Runs are independent
    /// and seeded only by their own seed, so `parallel` never changes the
    /// result.
    pub fn execute(&self, parallel: bool) -> Vec<Result<RunOutput, HarnessError>> {
        let jobs: Vec<(&Contender, u64)> =
            self.contenders.iter().flat_map(|c| self.config.run.seeds.iter().map(move |&s| (c, s))).collect();
        if parallel {
            jobs.par_iter().map(|&(c, s)| self.run_one(c, s)).collect()
        } else {
            jobs.iter().map(|&(c, s)| self.run_one(c, s)).collect()
        }
    }

    pub fn contender(&self, label: &str) -> Option<&Contender> {
        self.contenders.iter().find(|c| c.label == label)
    }

    /// `key=value` entries of the metadata sidecar.
    pub fn metadata(&self, contender: &Contender, seed: u64) -> Vec<(String, String)> {
        let p = &contender.params;
        let (qx, qy) = (contender.cfg.compressor_x, contender.cfg.compressor_y);
        let d = self.problem.dim();
        let moreau = &contender.hooks.moreau;
        let config_json = serde_json::to_string(&self.config).unwrap_or_default();
        let entries: Vec<(&str, String)> = vec![
            ("algorithm", contender.algo.name().to_string()),
            ("label", contender.label.clone()),
            ("seed", seed.to_string()),
            ("preset", p.preset.to_string()),
            ("eta", format!("{:e}", p.eta)),
            ("gamma_x", format!("{:e}", p.gamma_x)),
            ("gamma_y", format!("{:e}", p.gamma_y)),
            ("lambda", format!("{:e}", p.lambda)),
            ("smoothness", format!("{:e}", p.smoothness)),
            ("rho", format!("{:e}", p.rho)),
            ("rho_hat_x", format!("{:e}", p.rho_hat_x)),
            ("rho_hat_y", format!("{:e}", p.rho_hat_y)),
            ("alpha_sq", format!("{:e}", p.alpha_sq)),
            ("alpha_sq_x", format!("{:e}", qx.alpha_sq(d))),
            ("alpha_sq_y", format!("{:e}", qy.alpha_sq(d))),
            ("compressor_x", qx.to_string()),
            ("compressor_y", qy.to_string()),
            ("batch", contender.cfg.batch.to_string()),
            ("iters", contender.cfg.iters.to_string()),
            ("cadence", contender.hooks.cadence.to_string()),
            ("inner_tol", moreau.inner_tol.map_or("1e-9*max(1,|x|)".to_string(), |t| format!("{t:e}"))),
            ("inner_max_iters", moreau.inner_max_iters.to_string()),
            ("workers", self.problem.n_workers().to_string()),
            ("dim", d.to_string()),
            ("problem_fingerprint", self.problem.fingerprint()),
            ("config", config_json),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// `<label>_seed<seed>.csv` and its `.meta` sidecar.
    pub fn artifact_paths(out: &Path, label: &str, seed: u64) -> (PathBuf, PathBuf) {
        let stem = format!("{label}_seed{seed}");
        (out.join(format!("{stem}.csv")), out.join(format!("{stem}.meta")))
    }

    pub fn write_run(&self, out: &Path, run: &RunOutput) -> Result<(PathBuf, PathBuf), HarnessError> {
        let contender = self.contender(&run.label).expect("run comes from this experiment");
        let (csv, meta) = Self::artifact_paths(out, &run.label, run.seed);
        emit_csv(&run.trajectory.records, &csv)?;
        write_metadata(&meta, &self.metadata(contender, run.seed))?;
        Ok((csv, meta))
    }
}
