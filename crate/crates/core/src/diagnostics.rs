//! Coverage diagnostics: density ratios between a policy's occupancy and a
//! behavior distribution, the robust Bellman-error transfer coefficient over
//! a finite probe set, and a sampled scan for the concentrability constant.
//!
//! Every quantity here is a sampled or probe-restricted maximum, so the
//! reported numbers are lower bounds on the corresponding suprema.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::divergence::PhiDivergence;
use crate::error::{Result, RrlError};
use crate::mdp::{
    occupancy_measure, occupancy_measures_fh, FiniteHorizonMdp, Policy, StateActionDistribution, TabularMdp,
};
use crate::oracle::{
    robust_dp_finite_horizon_with, robust_policy_evaluation_with, robust_value_iteration_with, worst_case_row,
    InnerOperator, OracleOptions, QTable, GRID_MIN_RESOLUTION,
};
use crate::rng;

/// Denominators at or below this are treated as vanishing.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

/// A (step, state, action) location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub h: usize,
    pub s: usize,
    pub a: usize,
}

/// sup of an occupancy ratio together with where it is attained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityRatio {
    /// `f64::INFINITY` when the policy visits a cell the behavior never does.
    #[serde(with = "extended")]
    pub value: f64,
    pub witness: Option<Cell>,
}

/// The transfer-coefficient maximum over a probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEstimate {
    pub value: f64,
    /// Index of the maximizing probe.
    pub probe: usize,
    /// Probes dropped because their denominator vanished.
    pub skipped: Vec<usize>,
}

/// Result of [`robust_coverage_scan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    #[serde(with = "extended")]
    pub sup_density_ratio: f64,
    pub transfer_coefficient_estimate: f64,
    pub witnesses: CoverageWitnesses,
    /// Policies scored (the robust optimal policy plus the random ones).
    pub policies_scanned: usize,
    /// Worst-case models that entered the scan.
    pub robust_models_scanned: usize,
    /// Always true: the scan is a sampled maximum, never a certificate.
    pub lower_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageWitnesses {
    /// Cell attaining the density-ratio maximum.
    pub cell: Option<Cell>,
    /// Policy attaining it: 0 is the robust optimal policy, i ≥ 1 the i-th
    /// random policy.
    pub policy: usize,
    /// Whether it was attained under a worst-case model rather than P⁰.
    pub under_worst_case_model: bool,
    /// Probe attaining the transfer estimate.
    pub probe: usize,
    pub skipped_probes: Vec<usize>,
}

impl CoverageReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Serializes +∞ as the string "inf" so reports stay valid JSON.
mod extended {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if x.is_finite() {
            Repr::Number(*x).serialize(s)
        } else {
            Repr::Text(if *x > 0.0 { "inf" } else { "-inf" }.into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("unexpected value {other:?}"))),
            },
        }
    }
}

fn check_mu(mu: &StateActionDistribution, n_states: usize, n_actions: usize) -> Result<()> {
    if mu.n_states != n_states || mu.n_actions != n_actions {
        return Err(RrlError::ShapeMismatch(format!(
            "behavior distribution is {}x{}, model is {n_states}x{n_actions}",
            mu.n_states, mu.n_actions
        )));
    }
    Ok(())
}

/// Largest ratio occ/μ over cells of one step, ties broken by lowest cell.
fn ratio_sup(occ: &[f64], mu: &[f64], n_actions: usize, h: usize) -> DensityRatio {
    let mut best = DensityRatio { value: 0.0, witness: None };
    for (c, (&d, &m)) in occ.iter().zip(mu).enumerate() {
        if d <= 0.0 {
            continue;
        }
        let r = if m > 0.0 { d / m } else { f64::INFINITY };
        if best.witness.is_none() || r > best.value {
            best = DensityRatio {
                value: r,
                witness: Some(Cell { h, s: c / n_actions, a: c % n_actions }),
            };
        }
    }
    best
}

fn merge(best: &mut DensityRatio, candidate: DensityRatio) {
    if best.witness.is_none() || (candidate.witness.is_some() && candidate.value > best.value) {
        *best = candidate;
    }
}

/// sup_{h,s,a} d^π_h(s,a) / μ_h(s,a) with exact finite-horizon occupancies.
pub fn density_ratio_sup_fh(
    mdp: &FiniteHorizonMdp,
    mu: &[StateActionDistribution],
    policy: &Policy,
) -> Result<DensityRatio> {
    if mu.len() != mdp.horizon {
        return Err(RrlError::ShapeMismatch(format!(
            "{} behavior distributions for horizon {}",
            mu.len(),
            mdp.horizon
        )));
    }
    for m in mu {
        check_mu(m, mdp.n_states, mdp.n_actions)?;
    }
    let occ = occupancy_measures_fh(mdp, policy)?;
    let mut best = DensityRatio { value: 0.0, witness: None };
    for (h, (d, m)) in occ.iter().zip(mu).enumerate() {
        merge(&mut best, ratio_sup(d, &m.weights, mdp.n_actions, h));
    }
    Ok(best)
}

/// sup_{s,a} d^π(s,a) / μ(s,a) with the discounted occupancy.
pub fn density_ratio_sup(mdp: &TabularMdp, mu: &StateActionDistribution, policy: &Policy) -> Result<DensityRatio> {
    check_mu(mu, mdp.n_states, mdp.n_actions)?;
    let occ = occupancy_measure(mdp, policy)?;
    Ok(ratio_sup(&occ, &mu.weights, mdp.n_actions, 0))
}

/// Robust Bellman residuals (T f_{h+1})_h − f_h of a probe, per step and cell,
/// with V_{h+1}(s) = max_a f_{h+1}(s, a) and f_H ≡ 0.
pub fn bellman_residuals_fh(
    mdp: &FiniteHorizonMdp,
    probe: &QTable,
    div: PhiDivergence,
    lambda: f64,
) -> Result<Vec<Vec<f64>>> {
    if probe.n_steps != mdp.horizon || probe.n_states != mdp.n_states || probe.n_actions != mdp.n_actions {
        return Err(RrlError::ShapeMismatch(format!(
            "probe {}x{}x{} for a model with horizon {} and {}x{} cells",
            probe.n_steps, probe.n_states, probe.n_actions, mdp.horizon, mdp.n_states, mdp.n_actions
        )));
    }
    let op = InnerOperator::robust(div, lambda);
    let v_max = mdp.v_max();
    (0..mdp.horizon)
        .map(|h| {
            let v_next = if h + 1 < mdp.horizon {
                probe.state_values(h + 1)
            } else {
                vec![0.0; mdp.n_states]
            };
            let mut out = Vec::with_capacity(mdp.n_cells());
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let inner = op
                        .apply(&v_next, mdp.row(h, s, a))
                        .map_err(|e| e.context(format!("step {h}, cell (s={s}, a={a})")))?;
                    let t = (mdp.reward(h, s, a) + inner).clamp(0.0, v_max);
                    out.push(t - probe.get(h, s, a));
                }
            }
            Ok(out)
        })
        .collect()
}

/// Robust Bellman residuals (T f) − f of a single-step probe under the
/// discounted operator.
pub fn bellman_residuals(mdp: &TabularMdp, probe: &QTable, div: PhiDivergence, lambda: f64) -> Result<Vec<f64>> {
    if probe.n_steps != 1 || probe.n_states != mdp.n_states || probe.n_actions != mdp.n_actions {
        return Err(RrlError::ShapeMismatch(format!(
            "probe {}x{}x{} for a {}x{} model",
            probe.n_steps, probe.n_states, probe.n_actions, mdp.n_states, mdp.n_actions
        )));
    }
    let op = InnerOperator::robust(div, lambda);
    let v = probe.state_values(0);
    let mut out = Vec::with_capacity(mdp.n_cells());
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let inner = op
                .apply(&v, mdp.row(s, a))
                .map_err(|e| e.context(format!("cell (s={s}, a={a})")))?;
            let t = (mdp.reward(s, a) + mdp.gamma * inner).clamp(0.0, mdp.v_max());
            out.push(t - probe.get(0, s, a));
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn abs_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y.abs()).sum()
}

/// Maximum over probes of a signed numerator over an absolute denominator,
/// each summed over steps.
fn transfer_max(
    occ: &[Vec<f64>],
    mu: &[&[f64]],
    residuals: impl Iterator<Item = Result<Vec<Vec<f64>>>>,
) -> Result<TransferEstimate> {
    let mut best: Option<(f64, usize)> = None;
    let mut skipped = Vec::new();
    for (i, res) in residuals.enumerate() {
        let res = res.map_err(|e| e.context(format!("probe {i}")))?;
        let num: f64 = occ.iter().zip(&res).map(|(d, x)| dot(d, x)).sum();
        let den: f64 = mu.iter().zip(&res).map(|(m, x)| abs_dot(m, x)).sum();
        if den <= DEGENERATE_DENOMINATOR {
            skipped.push(i);
            continue;
        }
        let ratio = num / den;
        if best.is_none_or(|(b, _)| ratio > b) {
            best = Some((ratio, i));
        }
    }
    let (value, probe) = best.ok_or(RrlError::AllProbesDegenerate)?;
    Ok(TransferEstimate { value, probe, skipped })
}

/// max over probes f of Σ_h E_{d^π_h}[T f_{h+1} − f_h] / Σ_h E_{μ_h}|T f_{h+1} − f_h|,
/// with T the robust operator computed exactly per cell.
pub fn transfer_coefficient_estimate_fh(
    mdp: &FiniteHorizonMdp,
    policy: &Policy,
    mu: &[StateActionDistribution],
    probes: &[QTable],
    div: PhiDivergence,
    lambda: f64,
) -> Result<TransferEstimate> {
    if mu.len() != mdp.horizon {
        return Err(RrlError::ShapeMismatch(format!(
            "{} behavior distributions for horizon {}",
            mu.len(),
            mdp.horizon
        )));
    }
    for m in mu {
        check_mu(m, mdp.n_states, mdp.n_actions)?;
    }
    if probes.is_empty() {
        return Err(RrlError::Empty("probe set".into()));
    }
    let occ = occupancy_measures_fh(mdp, policy)?;
    let mu_w: Vec<&[f64]> = mu.iter().map(|m| m.weights.as_slice()).collect();
    transfer_max(&occ, &mu_w, probes.iter().map(|p| bellman_residuals_fh(mdp, p, div, lambda)))
}

/// The discounted analogue with a single step and the discounted occupancy.
pub fn transfer_coefficient_estimate(
    mdp: &TabularMdp,
    policy: &Policy,
    mu: &StateActionDistribution,
    probes: &[QTable],
    div: PhiDivergence,
    lambda: f64,
) -> Result<TransferEstimate> {
    check_mu(mu, mdp.n_states, mdp.n_actions)?;
    if probes.is_empty() {
        return Err(RrlError::Empty("probe set".into()));
    }
    let occ = vec![occupancy_measure(mdp, policy)?];
    let mu_w = [mu.weights.as_slice()];
    transfer_max(
        &occ,
        &mu_w,
        probes.iter().map(|p| bellman_residuals(mdp, p, div, lambda).map(|r| vec![r])),
    )
}

/// Perturbations of an oracle solution: the solution itself, constant
/// offsets, single-cell bumps and `n_random` uniform perturbations of size
/// up to `scale`, all clipped to [0, v_max].
pub fn default_probes(q_star: &QTable, v_max: f64, n_random: usize, scale: f64, seed: u64) -> Vec<QTable> {
    let mut probes = vec![q_star.clone()];
    for c in [-0.5, -0.1, 0.1, 0.5] {
        let mut p = q_star.clone();
        p.values.iter_mut().for_each(|x| *x += c * scale);
        probes.push(p);
    }
    for i in 0..q_star.values.len() {
        let mut p = q_star.clone();
        p.values[i] += scale;
        probes.push(p);
        let mut p = q_star.clone();
        p.values[i] -= scale;
        probes.push(p);
    }
    let mut rng = rng::stream(seed, rng::STREAM_PROBES);
    for _ in 0..n_random {
        let mut p = q_star.clone();
        p.values.iter_mut().for_each(|x| *x += rng.gen_range(-scale..=scale));
        probes.push(p);
    }
    for p in &mut probes {
        p.values.iter_mut().for_each(|x| *x = x.clamp(0.0, v_max));
    }
    probes
}

/// Random policies for the scan: alternately deterministic and stochastic.
fn random_policy(n_states: usize, n_actions: usize, index: usize, rng: &mut rng::Rng) -> Policy {
    if index.is_multiple_of(2) {
        Policy::StationaryDeterministic((0..n_states).map(|_| rng.gen_range(0..n_actions)).collect())
    } else {
        Policy::StationaryStochastic(
            (0..n_states)
                .map(|_| {
                    let raw: Vec<f64> = (0..n_actions).map(|_| rng.gen::<f64>() + 1e-3).collect();
                    let total: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / total).collect()
                })
                .collect(),
        )
    }
}

/// The worst-case model against V^π_λ, with each row pulled toward P⁰ until
/// D_φ(row, P⁰) ≤ cap. Cells are perturbed independently (rectangular).
fn capped_worst_case_model(
    mdp: &TabularMdp,
    policy: &Policy,
    div: PhiDivergence,
    lambda: f64,
    cap: f64,
    opts: &OracleOptions,
) -> Result<TabularMdp> {
    let q = robust_policy_evaluation_with(mdp, policy, div, lambda, opts)?;
    let v = q.policy_state_values(0, policy);
    let mut out = mdp.clone();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let nominal = mdp.row(s, a);
            let wc = worst_case_row(div, lambda, &v, nominal, GRID_MIN_RESOLUTION, mdp.fail_state)?;
            let mut t = 1.0;
            let row = loop {
                let row: Vec<f64> = wc.iter().zip(nominal).map(|(w, p)| t * w + (1.0 - t) * p).collect();
                if div.divergence(&row, nominal).to_f64() <= cap || t < 1e-6 {
                    break if t < 1e-6 { nominal.to_vec() } else { row };
                }
                t *= 0.5;
            };
            out.transitions[mdp.cell(s, a)] = row;
        }
    }
    out.validate().map_err(|e| e.context("capped worst-case model"))?;
    Ok(out)
}

/// Samples `n_random_policies` stationary policies and reports the largest
/// density ratio d^π/μ found, both under P⁰ and under worst-case models with
/// per-cell divergence at most 1/(λ(1−γ)); also estimates the transfer
/// coefficient of the robust optimal policy over [`default_probes`].
///
/// Models whose worst-case rows cannot be computed by the grid oracle (too
/// many successors) are scanned under P⁰ only.
pub fn robust_coverage_scan(
    mdp: &TabularMdp,
    mu: &StateActionDistribution,
    div: PhiDivergence,
    lambda: f64,
    n_random_policies: usize,
    seed: u64,
) -> Result<CoverageReport> {
    check_mu(mu, mdp.n_states, mdp.n_actions)?;
    let opts = OracleOptions::default();
    let solution = robust_value_iteration_with(mdp, div, lambda, &opts)?;
    let cap = 1.0 / (lambda * (1.0 - mdp.gamma));

    let mut best = DensityRatio { value: 0.0, witness: None };
    let mut best_policy = 0;
    let mut best_robust = false;
    let mut robust_models = 0;
    let mut policies = vec![solution.greedy.clone()];
    for i in 0..n_random_policies {
        let mut r = rng::substream(seed, rng::STREAM_POLICIES, i as u64);
        policies.push(random_policy(mdp.n_states, mdp.n_actions, i, &mut r));
    }
    for (i, pi) in policies.iter().enumerate() {
        let nominal = density_ratio_sup(mdp, mu, pi)?;
        if best.witness.is_none() || (nominal.witness.is_some() && nominal.value > best.value) {
            best = nominal;
            best_policy = i;
            best_robust = false;
        }
        match capped_worst_case_model(mdp, pi, div, lambda, cap, &opts) {
            Ok(model) => {
                robust_models += 1;
                let robust = density_ratio_sup(&model, mu, pi)?;
                if robust.witness.is_some() && robust.value > best.value {
                    best = robust;
                    best_policy = i;
                    best_robust = true;
                }
            }
            Err(e) if matches!(e.root(), RrlError::UnsupportedSize(_)) => {}
            Err(e) => return Err(e),
        }
    }

    let probes = default_probes(&solution.q_star, mdp.v_max(), 16, 0.1 * mdp.v_max(), seed);
    let transfer = transfer_coefficient_estimate(mdp, &solution.greedy, mu, &probes, div, lambda)?;
    Ok(CoverageReport {
        sup_density_ratio: best.value,
        transfer_coefficient_estimate: transfer.value,
        witnesses: CoverageWitnesses {
            cell: best.witness,
            policy: best_policy,
            under_worst_case_model: best_robust,
            probe: transfer.probe,
            skipped_probes: transfer.skipped,
        },
        policies_scanned: policies.len(),
        robust_models_scanned: robust_models,
        lower_bound: true,
    })
}

/// Finite-horizon probes around Q* of the robust problem.
pub fn default_probes_fh(
    mdp: &FiniteHorizonMdp,
    div: PhiDivergence,
    lambda: f64,
    n_random: usize,
    seed: u64,
) -> Result<Vec<QTable>> {
    let opts = OracleOptions { allow_ungrounded_tv: true, ..Default::default() };
    let solution = robust_dp_finite_horizon_with(mdp, div, lambda, &opts)?;
    Ok(default_probes(&solution.q_star, mdp.v_max(), n_random, 0.1 * mdp.v_max(), seed))
}
