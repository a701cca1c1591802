use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dproxsgt::algorithms::AlgorithmId;
use dproxsgt::harness::{certify, cli_compare, cli_run, CertifyOptions, HarnessError, RunOptions};

#[derive(Parser)]
#[command(name = "dproxsgt", version, about = "Decentralized proximal gradient tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Override a config key, e.g. `--set algorithm.eta=0.05` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (replaces run.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (replaces run.seeds).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Also write SVG charts of stationarity and consensus.
    #[arg(long)]
    svg: bool,
    /// Run seeds concurrently; outputs are identical to a serial run.
    #[arg(long)]
    parallel: bool,
}

impl Common {
    fn options(self) -> RunOptions {
        RunOptions { sets: self.sets, out: self.out, seeds: self.seeds, svg: self.svg, parallel: self.parallel }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every (algorithm, seed) of a config and write CSV + metadata.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run several configs or algorithms on one problem and summarize.
    Compare {
        /// Config file (repeatable); all must share problem, topology and seeds.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Comma-separated algorithm ids replacing each config's algorithm.id.
        #[arg(long, value_delimiter = ',')]
        algorithms: Option<Vec<AlgorithmId>>,
        #[command(flatten)]
        common: Common,
    },
    /// Check mixing-matrix and compressor invariants; prints JSON.
    Certify {
        /// Additional weight matrix file to check.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Monte Carlo trials per compressor certificate.
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fail(e: HarnessError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, common } => match cli_run(&config, &common.options()) {
            Ok(report) => {
                for p in report.csv.iter().chain(&report.svg) {
                    println!("wrote {}", p.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Compare { configs, algorithms, common } => match cli_compare(&configs, algorithms.as_deref(), &common.options()) {
            Ok(report) => {
                print!("{}", report.table);
                println!("wrote {}", report.run.out.join("summary.csv").display());
                for p in &report.run.svg {
                    println!("wrote {}", p.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Certify { matrix, trials, seed } => {
            let report = certify(&CertifyOptions { matrix, trials, seed });
            match serde_json::to_string_pretty(&report) {
                Ok(json) => println!("{json}"),
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            }
            if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE }
        }
    }
}
