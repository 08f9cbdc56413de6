//! Reproducible experiment driver for `robust-rrl`: parses a JSON config,
//! builds the instance, runs RPQ, HyTQ or the exact oracle over a list of
//! seeds, scores every returned policy against the oracle and writes
//! `run-manifest.json`, `results.csv`, `timings.csv` and per-seed traces.

pub mod config;
pub mod error;
pub mod runner;
pub mod sweep;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use robust_rrl::diagnostics::robust_coverage_scan;

pub use config::{Algorithm, Axis, ExperimentConfig, Instance};
pub use error::{HarnessError, HarnessResult, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};
pub use runner::{run_experiment, ResultRow, RunSummary};
pub use sweep::{median, sweep, SweepSummary};

#[derive(Debug, Parser)]
#[command(name = "robust-rrl", version, about = "Robust phi-regularized RL experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment over every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds (override the config).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run the experiment once per value of one axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// n_samples, lambda or K
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Sampled coverage report (density ratios and transfer coefficient) of
    /// the configured behavior distribution on a discounted instance.
    Coverage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Random policies to sample.
        #[arg(long, default_value_t = 32)]
        policies: usize,
    },
}

fn load(config: &PathBuf, out: Option<PathBuf>, seeds: Option<Vec<u64>>) -> HarnessResult<ExperimentConfig> {
    let mut c = ExperimentConfig::load(config)?;
    if let Some(o) = out {
        c.output_dir = o;
    }
    if let Some(s) = seeds {
        c.seeds = s;
    }
    c.validate()?;
    Ok(c)
}

fn coverage(c: &ExperimentConfig, policies: usize) -> HarnessResult<()> {
    let Instance::Discounted(mdp) = c.instance()? else {
        return Err(HarnessError::Config("coverage scans need a discounted instance".into()));
    };
    let mu = c.behavior(mdp.n_states, mdp.n_actions)?;
    let report = robust_coverage_scan(&mdp, &mu, c.divergence, c.lambda, policies, c.seeds[0])?;
    std::fs::create_dir_all(&c.output_dir)?;
    std::fs::write(c.output_dir.join("coverage.json"), report.to_json())?;
    println!("{}", report.to_json());
    Ok(())
}

fn dispatch(command: Command) -> (Option<PathBuf>, HarnessResult<()>) {
    match command {
        Command::Run { config, out, seeds } => match load(&config, out, seeds) {
            Ok(c) => {
                let dir = c.output_dir.clone();
                let r = run_experiment(&c).map(|s| {
                    println!("wrote {} rows to {}", s.rows.len(), s.output_dir.display());
                });
                (Some(dir), r)
            }
            Err(e) => (None, Err(e)),
        },
        Command::Sweep { config, axis, values, out, seeds } => {
            let c = match load(&config, out, seeds) {
                Ok(c) => c,
                Err(e) => return (None, Err(e)),
            };
            let dir = c.output_dir.clone();
            let r = Axis::parse(&axis).and_then(|a| sweep(&c, a, &values)).map(|s| {
                for row in &s.summary {
                    println!(
                        "{}={}: median suboptimality {} over {} seeds",
                        row.axis, row.value, row.median_suboptimality, row.n_seeds
                    );
                }
            });
            (Some(dir), r)
        }
        Command::Coverage { config, out, policies } => match load(&config, out, None) {
            Ok(c) => {
                let dir = c.output_dir.clone();
                (Some(dir), coverage(&c, policies))
            }
            Err(e) => (None, Err(e)),
        },
    }
}

/// Entry point: parses `args` (including the program name) and returns the
/// process exit code. Failures print a JSON error document on stderr and,
/// when the output directory is known, into `error.json` there.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        (_, Ok(())) => EXIT_OK,
        (dir, Err(e)) => {
            eprintln!("{}", e.to_json());
            if let Some(d) = dir {
                runner::write_error(&d, &e);
            }
            e.exit_code()
        }
    }
}
