//! Experiment orchestration behind the `dproxsgt` command line.
//!
//! `run` executes one config over its seeds and writes a metrics CSV plus a
//! `.meta` sidecar per (algorithm, seed). `compare` runs several configs or
//! algorithms on the same problem and topology and summarizes them.
//! `certify` checks the mixing matrix and compressor invariants.

pub mod certify;
pub mod compare;
pub mod config;
pub mod experiment;
pub mod svg;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use certify::{certify, CertifyOptions, CertifyReport};
pub use compare::SummaryRow;
pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{Contender, Experiment, RunOutput};

use crate::algorithms::{AlgoError, AlgorithmId};
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run `{label}` seed {seed} failed: {source}")]
    Run { label: String, seed: u64, source: AlgoError },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("refusing to compare: {0}")]
    Mismatch(String),
}

impl HarnessError {
    /// Process exit status: 2 for invalid input, 1 for failures during runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Mismatch(_) => 2,
            _ => 1,
        }
    }
}

/// Options shared by `run` and `compare`.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// `key=value` overrides applied in order.
    pub sets: Vec<String>,
    /// Replaces `run.out`.
    pub out: Option<PathBuf>,
    /// Replaces `run.seeds`.
    pub seeds: Option<Vec<u64>>,
    pub svg: bool,
    pub parallel: bool,
}

impl RunOptions {
    fn overrides(&self) -> Vec<String> {
        let mut sets = self.sets.clone();
        if let Some(seeds) = &self.seeds {
            let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
            sets.push(format!("run.seeds=[{}]", list.join(", ")));
        }
        sets
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub out: PathBuf,
    pub csv: Vec<PathBuf>,
    pub svg: Vec<PathBuf>,
    pub runs: Vec<RunOutput>,
}

fn create_dir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path).map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Load and fully validate a config before anything is written.
pub fn load_experiment(path: &Path, opts: &RunOptions) -> Result<Experiment, HarnessError> {
    let mut config = ExperimentConfig::from_file(path, &opts.overrides())?;
    if let Some(out) = &opts.out {
        config.run.out = out.clone();
    }
    Ok(Experiment::prepare(config)?)
}

fn write_all(experiments: &[&Experiment], results: Vec<Result<RunOutput, HarnessError>>, out: &Path) -> Result<(Vec<PathBuf>, Vec<RunOutput>), HarnessError> {
    let mut csv = Vec::new();
    let mut runs = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(run) => {
                let owner = experiments.iter().find(|e| e.contender(&run.label).is_some()).expect("label belongs to an experiment");
                csv.push(owner.write_run(out, &run)?.0);
                runs.push(run);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok((csv, runs)),
    }
}

/// `run`: every (algorithm, seed) of one config.
pub fn cli_run(config: &Path, opts: &RunOptions) -> Result<RunReport, HarnessError> {
    let exp = load_experiment(config, opts)?;
    let out = exp.config.run.out.clone();
    create_dir(&out)?;
    let results = exp.execute(opts.parallel);
    let (csv, runs) = write_all(&[&exp], results, &out)?;
    let svg = if opts.svg { compare::write_charts(&runs, &out)? } else { Vec::new() };
    Ok(RunReport { out, csv, svg, runs })
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub run: RunReport,
    pub rows: Vec<SummaryRow>,
    pub table: String,
}

/// `compare`: runs from one or more configs that share problem, topology
/// and seeds. `algorithms` replaces each config's `algorithm.id`.
pub fn cli_compare(configs: &[PathBuf], algorithms: Option<&[AlgorithmId]>, opts: &RunOptions) -> Result<CompareReport, HarnessError> {
    if configs.is_empty() {
        return Err(HarnessError::Mismatch("no configs given".into()));
    }
    let mut opts = opts.clone();
    if let Some(algos) = algorithms {
        let names: Vec<String> = algos.iter().map(|a| format!("\"{a}\"")).collect();
        opts.sets.push(format!("algorithm.id=[{}]", names.join(", ")));
    }
    let mut experiments = configs.iter().map(|c| load_experiment(c, &opts)).collect::<Result<Vec<_>, _>>()?;
    compare::check_compatible(&experiments)?;
    let names: Vec<String> = configs
        .iter()
        .map(|c| c.file_stem().map_or_else(|| "config".to_string(), |s| s.to_string_lossy().into_owned()))
        .collect();
    compare::disambiguate(&mut experiments, &names);

    let out = opts.out.clone().unwrap_or_else(|| experiments[0].config.run.out.clone());
    create_dir(&out)?;
    let results: Vec<Result<RunOutput, HarnessError>> = experiments.iter().flat_map(|e| e.execute(opts.parallel)).collect();
    let refs: Vec<&Experiment> = experiments.iter().collect();
    let (csv, runs) = write_all(&refs, results, &out)?;
    let rows = compare::summarize(&runs);
    compare::write_summary_csv(&rows, &out.join("summary.csv"))?;
    let svg = if opts.svg { compare::write_charts(&runs, &out)? } else { Vec::new() };
    let table = compare::format_table(&rows);
    Ok(CompareReport { run: RunReport { out, csv, svg, runs }, rows, table })
}
