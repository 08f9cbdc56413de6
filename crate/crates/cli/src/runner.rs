//! Executes one experiment: instance, oracle, per-seed algorithm runs and
//! scoring, then writes the manifest, results and traces.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use robust_rrl::hytq::{
    check_ledger, cumulative_suboptimality, hytq_run_on_model, score_records, uniform_mixture_policy, HytqConfig,
};
use robust_rrl::mdp::{sample_offline_dataset, sample_offline_dataset_fh};
use robust_rrl::oracle::{
    robust_dp_finite_horizon_with, robust_policy_value, robust_policy_value_fh, robust_value_iteration_with,
    OracleOptions,
};
use robust_rrl::rpq::{rpq_run, RpqConfig};
use robust_rrl::{FiniteHorizonMdp, PhiDivergence, RobustSolution, TabularMdp, TransitionDataset};

use crate::config::{Algorithm, ExperimentConfig, Instance};
use crate::error::{HarnessError, HarnessResult};

pub const THREADS_ENV: &str = "ROBUST_RRL_THREADS";
pub const MANIFEST_FILE: &str = "run-manifest.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const ERROR_FILE: &str = "error.json";

/// One row of results.csv. Wall-clock times live in timings.csv so that
/// results are byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub algorithm: String,
    pub divergence: String,
    pub lambda: f64,
    /// RPQ: N. HyTQ: m_off. Empty for the oracle and for dataset files.
    pub n_samples: Option<usize>,
    /// RPQ/HyTQ: K. Oracle: sweeps (discounted) or H.
    pub iterations: usize,
    /// V*(d0) of the exact oracle.
    pub optimal_value: f64,
    /// Robust value of the returned policy (HyTQ: the uniform mixture).
    pub robust_value: f64,
    pub suboptimality: f64,
    /// Robust value of the last greedy policy.
    pub last_policy_value: f64,
    /// Sup-norm distance of the final Q estimate to Q*.
    pub q_sup_error: f64,
}

/// Everything one seed produces, kept in memory until the single writer
/// flushes it.
struct SeedOutcome {
    row: ResultRow,
    wall_ms: f64,
    /// (path relative to the output directory, contents)
    artifacts: Vec<(PathBuf, String)>,
    dataset_source: String,
}

#[derive(Debug, Clone, Serialize)]
struct ManifestRun {
    seed: u64,
    /// Seed of the offline dataset stream (absent when a file is used).
    dataset_seed: Option<u64>,
    /// Seed of the algorithm's own randomness (ERM restarts, rollouts).
    algorithm_seed: u64,
    dataset: String,
    trace_dir: String,
}

#[derive(Debug, Clone, Serialize)]
struct InstanceSummary {
    kind: &'static str,
    n_states: usize,
    n_actions: usize,
    gamma: Option<f64>,
    horizon: Option<usize>,
    fail_state: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct OracleSummary {
    optimal_value: f64,
    sweeps: usize,
    residual: f64,
    tol: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    library: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    instance: InstanceSummary,
    oracle: OracleSummary,
    runs: Vec<ManifestRun>,
    files: Vec<String>,
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<ResultRow>,
    pub output_dir: PathBuf,
}

/// Worker pool sized by `ROBUST_RRL_THREADS` (default: rayon's choice).
pub fn thread_pool() -> HarnessResult<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| HarnessError::Config(format!("{THREADS_ENV} = {v:?} is not a positive integer")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Io(format!("cannot start worker pool: {e}")))
}

/// The oracle solution of the configured robust problem.
fn solve_oracle(config: &ExperimentConfig, instance: &Instance) -> HarnessResult<RobustSolution> {
    let opts = OracleOptions::with_tol(config.tol);
    let sol = match instance {
        Instance::Discounted(m) => robust_value_iteration_with(m, config.divergence, config.lambda, &opts),
        Instance::FiniteHorizon(m) => robust_dp_finite_horizon_with(m, config.divergence, config.lambda, &opts),
    };
    sol.map_err(|e| HarnessError::from(e).context("oracle"))
}

fn load_dataset(path: &Path) -> HarnessResult<TransitionDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read dataset {}: {e}", path.display())))?;
    TransitionDataset::from_jsonl(&text).map_err(|e| HarnessError::Config(format!("dataset {}: {e}", path.display())))
}

fn trace_dir(seed: u64) -> PathBuf {
    PathBuf::from("traces").join(format!("seed-{seed}"))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifacts serialize")
}

fn run_rpq_seed(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    oracle: &RobustSolution,
    seed: u64,
) -> HarnessResult<SeedOutcome> {
    let start = Instant::now();
    let (dataset, source) = match &config.dataset.file {
        Some(path) => (load_dataset(path)?, path.display().to_string()),
        None => {
            let n = config.dataset.n_samples.expect("validated");
            let mu = config.behavior(mdp.n_states, mdp.n_actions)?;
            (sample_offline_dataset(mdp, &mu, n, seed)?, format!("sampled: {n} records"))
        }
    };
    let mut rpq = RpqConfig::tabular(
        config.divergence,
        config.lambda,
        mdp.gamma,
        mdp.n_states,
        mdp.n_actions,
        mdp.fail_state,
    );
    rpq.iterations = config.iterations;
    rpq.erm.seed = seed;
    let out = rpq_run(&rpq, &dataset)?;
    let opts = OracleOptions::with_tol(config.tol);
    let value = robust_policy_value(mdp, &out.policy, config.divergence, config.lambda, &opts)?;
    let optimal = oracle.value(&mdp.d0);
    let q_err = out.q.to_qtable().sup_distance(&oracle.q_star);
    let dir = trace_dir(seed);
    Ok(SeedOutcome {
        row: ResultRow {
            seed,
            algorithm: config.algorithm.name().into(),
            divergence: config.divergence.to_string(),
            lambda: config.lambda,
            n_samples: config.dataset.file.is_none().then(|| dataset.len()),
            iterations: out.iterations,
            optimal_value: optimal,
            robust_value: value,
            suboptimality: optimal - value,
            last_policy_value: value,
            q_sup_error: q_err,
        },
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        artifacts: vec![
            (dir.join("rpq_trace.csv"), out.trace.to_csv()),
            (dir.join("policy.json"), json(&out.policy)),
        ],
        dataset_source: source,
    })
}

fn run_hytq_seed(
    config: &ExperimentConfig,
    mdp: &FiniteHorizonMdp,
    oracle: &RobustSolution,
    seed: u64,
) -> HarnessResult<SeedOutcome> {
    let start = Instant::now();
    let k = config.iterations.expect("validated");
    let horizon = mdp.horizon;
    let (offline, source) = match &config.dataset.file {
        Some(path) => (load_dataset(path)?, path.display().to_string()),
        None => {
            let m = config.dataset.n_samples.unwrap_or(k);
            let mu = config.behavior(mdp.n_states, mdp.n_actions)?;
            let data = sample_offline_dataset_fh(mdp, &vec![mu; horizon], m, seed)?;
            (data, format!("sampled: {m} records per step"))
        }
    };
    let mut cfg = HytqConfig::tabular(config.lambda, k, horizon, mdp.n_states, mdp.n_actions, seed);
    cfg.m_off = Some(offline.len() / horizon);
    cfg.m_on = config.m_on.unwrap_or(1);
    let mut run = hytq_run_on_model(mdp, &offline, &cfg)?;
    check_ledger(&run, cfg.m_off(), cfg.m_on)
        .map_err(|e| HarnessError::Numerical(format!("dataset ledger invariant violated: {e}")))?;
    score_records(&mut run, mdp, config.lambda)?;
    let trace = cumulative_suboptimality(&run.records, oracle, &mdp.d0)?;
    let mixture = uniform_mixture_policy(&run.policies())?;
    let mixture_value = robust_policy_value_fh(mdp, &mixture, PhiDivergence::Tv, config.lambda)?;
    let last = run.records.last().expect("K ≥ 1");
    let last_policy = last.q.greedy_policy();
    let last_value = robust_policy_value_fh(mdp, &last_policy, PhiDivergence::Tv, config.lambda)?;
    let mut q_err: f64 = 0.0;
    for h in 0..horizon {
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                q_err = q_err.max((last.q.evaluate(h, s, a) - oracle.q_star.get(h, s, a)).abs());
            }
        }
    }
    let optimal = oracle.value(&mdp.d0);
    let mut records = String::new();
    for rec in &run.records {
        records.push_str(&serde_json::to_string(rec).expect("records serialize"));
        records.push('\n');
    }
    let dir = trace_dir(seed);
    Ok(SeedOutcome {
        row: ResultRow {
            seed,
            algorithm: config.algorithm.name().into(),
            divergence: config.divergence.to_string(),
            lambda: config.lambda,
            n_samples: config.dataset.file.is_none().then(|| cfg.m_off()),
            iterations: k,
            optimal_value: optimal,
            robust_value: mixture_value,
            suboptimality: optimal - mixture_value,
            last_policy_value: last_value,
            q_sup_error: q_err,
        },
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        artifacts: vec![
            (dir.join("suboptimality.csv"), trace.to_csv()),
            (dir.join("records.jsonl"), records),
            (dir.join("mixture_policy.json"), json(&mixture)),
        ],
        dataset_source: source,
    })
}

fn run_oracle_seed(
    config: &ExperimentConfig,
    instance: &Instance,
    oracle: &RobustSolution,
    seed: u64,
) -> SeedOutcome {
    let d0 = match instance {
        Instance::Discounted(m) => &m.d0,
        Instance::FiniteHorizon(m) => &m.d0,
    };
    let optimal = oracle.value(d0);
    SeedOutcome {
        row: ResultRow {
            seed,
            algorithm: config.algorithm.name().into(),
            divergence: config.divergence.to_string(),
            lambda: config.lambda,
            n_samples: None,
            iterations: oracle.sweeps,
            optimal_value: optimal,
            robust_value: optimal,
            suboptimality: 0.0,
            last_policy_value: optimal,
            q_sup_error: 0.0,
        },
        wall_ms: 0.0,
        artifacts: Vec::new(),
        dataset_source: "none".into(),
    }
}

fn run_seed(
    config: &ExperimentConfig,
    instance: &Instance,
    oracle: &RobustSolution,
    seed: u64,
) -> HarnessResult<SeedOutcome> {
    let outcome = match (config.algorithm, instance) {
        (Algorithm::Rpq, Instance::Discounted(m)) => run_rpq_seed(config, m, oracle, seed),
        (Algorithm::Hytq, Instance::FiniteHorizon(m)) => run_hytq_seed(config, m, oracle, seed),
        (Algorithm::Oracle, _) => Ok(run_oracle_seed(config, instance, oracle, seed)),
        (alg, inst) => Err(HarnessError::Config(format!(
            "{} cannot run on a {} instance",
            alg.name(),
            inst.kind()
        ))),
    };
    outcome.map_err(|e| e.context(&format!("seed {seed}")))
}

fn write_file(root: &Path, rel: &Path, contents: &str) -> HarnessResult<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, contents).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Serializes rows as CSV with a header.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> HarnessResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs every seed of `config` in the worker pool and writes all artifacts
/// into `config.output_dir`. Output ordering follows the seed list.
pub fn run_experiment(config: &ExperimentConfig) -> HarnessResult<RunSummary> {
    config.validate()?;
    let instance = config.instance()?;
    let oracle = solve_oracle(config, &instance)?;
    let pool = thread_pool()?;
    let outcomes: Vec<HarnessResult<SeedOutcome>> =
        pool.install(|| config.seeds.par_iter().map(|&s| run_seed(config, &instance, &oracle, s)).collect());
    let outcomes: Vec<SeedOutcome> = outcomes.into_iter().collect::<HarnessResult<_>>()?;

    // single writer from here on
    let root = &config.output_dir;
    std::fs::create_dir_all(root)
        .map_err(|e| HarnessError::Io(format!("cannot create {}: {e}", root.display())))?;
    let mut files = vec![MANIFEST_FILE.to_string(), RESULTS_FILE.to_string(), TIMINGS_FILE.to_string()];
    if config.algorithm == Algorithm::Oracle {
        write_file(root, Path::new("q_star.json"), &oracle.to_json())?;
        files.push("q_star.json".into());
    }
    let rows: Vec<ResultRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    write_file(root, Path::new(RESULTS_FILE), &rows_to_csv(&rows)?)?;
    #[derive(Serialize)]
    struct Timing {
        seed: u64,
        wall_ms: f64,
    }
    let timings: Vec<Timing> = outcomes.iter().map(|o| Timing { seed: o.row.seed, wall_ms: o.wall_ms }).collect();
    write_file(root, Path::new(TIMINGS_FILE), &rows_to_csv(&timings)?)?;
    for o in &outcomes {
        for (rel, contents) in &o.artifacts {
            write_file(root, rel, contents)?;
            files.push(rel.display().to_string());
        }
    }

    let summary = match &instance {
        Instance::Discounted(m) => InstanceSummary {
            kind: "discounted",
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: Some(m.gamma),
            horizon: None,
            fail_state: m.fail_state,
        },
        Instance::FiniteHorizon(m) => InstanceSummary {
            kind: "finite_horizon",
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: None,
            horizon: Some(m.horizon),
            fail_state: m.fail_state(0),
        },
    };
    let d0 = match &instance {
        Instance::Discounted(m) => &m.d0,
        Instance::FiniteHorizon(m) => &m.d0,
    };
    let manifest = Manifest {
        library: "robust-rrl",
        version: robust_rrl::VERSION,
        config,
        instance: summary,
        oracle: OracleSummary {
            optimal_value: oracle.value(d0),
            sweeps: oracle.sweeps,
            residual: oracle.residual,
            tol: config.tol,
        },
        runs: outcomes
            .iter()
            .map(|o| ManifestRun {
                seed: o.row.seed,
                dataset_seed: (config.algorithm != Algorithm::Oracle && config.dataset.file.is_none())
                    .then_some(o.row.seed),
                algorithm_seed: o.row.seed,
                dataset: o.dataset_source.clone(),
                trace_dir: trace_dir(o.row.seed).display().to_string(),
            })
            .collect(),
        files,
    };
    write_file(root, Path::new(MANIFEST_FILE), &json(&manifest))?;
    Ok(RunSummary { rows, output_dir: root.clone() })
}

/// Writes the error document into the output directory (best effort).
pub fn write_error(dir: &Path, err: &HarnessError) {
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = std::fs::write(dir.join(ERROR_FILE), err.to_json());
    }
}
