//! One-axis sweeps: a full run per value plus aggregated CSVs.

use std::path::PathBuf;

use serde::Serialize;

use crate::config::{Axis, ExperimentConfig};
use crate::error::{HarnessError, HarnessResult};
use crate::runner::{rows_to_csv, run_experiment, ResultRow};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

/// results.csv rows of every value, prefixed with the axis value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub row: ResultRow,
}

/// sweep.csv: the axis columns followed by the results.csv columns.
fn sweep_csv(rows: &[SweepRow]) -> HarnessResult<String> {
    let results = rows_to_csv(&rows.iter().map(|r| r.row.clone()).collect::<Vec<_>>())?;
    let mut lines = results.lines();
    let mut out = String::new();
    if let Some(header) = lines.next() {
        out.push_str("axis,value,");
        out.push_str(header);
        out.push('\n');
    }
    for (line, r) in lines.zip(rows) {
        out.push_str(&format!("{},{},{line}\n", r.axis, r.value));
    }
    Ok(out)
}

/// Per-value aggregates across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummaryRow {
    pub axis: String,
    pub value: String,
    pub n_seeds: usize,
    pub median_suboptimality: f64,
    pub mean_suboptimality: f64,
    pub median_q_sup_error: f64,
    pub median_optimal_value: f64,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummaryRow>,
    pub output_dir: PathBuf,
}

/// Median with the mean of the two central elements for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `config` once per value of `axis`, each into `<out>/<axis>=<value>`,
/// then writes sweep.csv and sweep_summary.csv into `<out>`.
pub fn sweep(config: &ExperimentConfig, axis: Axis, values: &[String]) -> HarnessResult<SweepSummary> {
    if values.is_empty() || values.iter().any(|v| v.trim().is_empty()) {
        return Err(HarnessError::Config("sweep needs a nonempty list of values".into()));
    }
    let parsed: Vec<(String, f64)> = values
        .iter()
        .map(|v| {
            let t = v.trim().to_string();
            t.parse::<f64>()
                .map(|x| (t.clone(), x))
                .map_err(|_| HarnessError::Config(format!("sweep value {t:?} is not a number")))
        })
        .collect::<HarnessResult<_>>()?;
    let mut configs = Vec::with_capacity(parsed.len());
    for (text, x) in &parsed {
        let mut c = config.with_axis(axis, *x)?;
        c.output_dir = config.output_dir.join(format!("{}={text}", axis.name()));
        configs.push((text.clone(), c));
    }

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (text, c) in &configs {
        let run = run_experiment(c).map_err(|e| e.context(&format!("{}={text}", axis.name())))?;
        let subs: Vec<f64> = run.rows.iter().map(|r| r.suboptimality).collect();
        let errs: Vec<f64> = run.rows.iter().map(|r| r.q_sup_error).collect();
        let opts: Vec<f64> = run.rows.iter().map(|r| r.optimal_value).collect();
        summary.push(SweepSummaryRow {
            axis: axis.name().into(),
            value: text.clone(),
            n_seeds: run.rows.len(),
            median_suboptimality: median(&subs),
            mean_suboptimality: subs.iter().sum::<f64>() / subs.len() as f64,
            median_q_sup_error: median(&errs),
            median_optimal_value: median(&opts),
        });
        rows.extend(run.rows.into_iter().map(|row| SweepRow {
            axis: axis.name().into(),
            value: text.clone(),
            row,
        }));
    }
    let root = &config.output_dir;
    std::fs::create_dir_all(root)?;
    std::fs::write(root.join(SWEEP_FILE), sweep_csv(&rows)?)?;
    std::fs::write(root.join(SWEEP_SUMMARY_FILE), rows_to_csv(&summary)?)?;
    Ok(SweepSummary { rows, summary, output_dir: root.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
