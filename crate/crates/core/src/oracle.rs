//! Exact ground truth for small tabular instances: a brute-force primal
//! inner problem, robust value iteration, robust dynamic programming and
//! robust policy evaluation, plus their non-robust counterparts.

use serde::{Deserialize, Serialize};

use crate::divergence::{ExtendedReal, PhiDivergence};
use crate::dual::{solve_inner_exact, WeightedValues, DEFAULT_TOL};
use crate::error::{Result, RrlError};
use crate::mdp::{FiniteHorizonMdp, Policy, TabularMdp};

/// Largest nominal support accepted by the grid oracle.
pub const GRID_MAX_SUPPORT: usize = 4;
/// Smallest grid resolution accepted by the grid oracle.
pub const GRID_MIN_RESOLUTION: usize = 100;

/// Q values indexed by (h, s, a); discounted tables have one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_steps: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_steps: usize, n_states: usize, n_actions: usize) -> Self {
        QTable {
            n_steps,
            n_states,
            n_actions,
            values: vec![0.0; n_steps * n_states * n_actions],
        }
    }

    /// A one-step table from cell values `s * n_actions + a`.
    pub fn from_cells(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(RrlError::ShapeMismatch(format!(
                "{} values for {n_states}x{n_actions} cells",
                values.len()
            )));
        }
        Ok(QTable { n_steps: 1, n_states, n_actions, values })
    }

    #[inline]
    pub fn index(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.n_states + s) * self.n_actions + a
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.values[self.index(h, s, a)]
    }

    pub fn set(&mut self, h: usize, s: usize, a: usize, v: f64) {
        let i = self.index(h, s, a);
        self.values[i] = v;
    }

    /// Cell values of step h, indexed `s * n_actions + a`.
    pub fn step(&self, h: usize) -> &[f64] {
        let n = self.n_states * self.n_actions;
        &self.values[h * n..(h + 1) * n]
    }

    pub fn step_mut(&mut self, h: usize) -> &mut [f64] {
        let n = self.n_states * self.n_actions;
        &mut self.values[h * n..(h + 1) * n]
    }

    pub fn state_value(&self, h: usize, s: usize) -> f64 {
        (0..self.n_actions).map(|a| self.get(h, s, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// max_a Q(h, s, a) for every s.
    pub fn state_values(&self, h: usize) -> Vec<f64> {
        (0..self.n_states).map(|s| self.state_value(h, s)).collect()
    }

    /// Lowest-index argmax.
    pub fn greedy_action(&self, h: usize, s: usize) -> usize {
        let mut best = 0;
        for a in 1..self.n_actions {
            if self.get(h, s, a) > self.get(h, s, best) {
                best = a;
            }
        }
        best
    }

    /// Stationary greedy policy for one-step tables, non-stationary otherwise.
    pub fn greedy_policy(&self) -> Policy {
        let table = |h: usize| (0..self.n_states).map(|s| self.greedy_action(h, s)).collect::<Vec<_>>();
        if self.n_steps == 1 {
            Policy::StationaryDeterministic(table(0))
        } else {
            Policy::NonstationaryDeterministic((0..self.n_steps).map(table).collect())
        }
    }

    /// Σ_a π(a|s) Q(h, s, a) for every s.
    pub fn policy_state_values(&self, h: usize, policy: &Policy) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                policy
                    .action_probs(h, s, self.n_actions)
                    .iter()
                    .enumerate()
                    .map(|(a, p)| if *p > 0.0 { p * self.get(h, s, a) } else { 0.0 })
                    .sum()
            })
            .collect()
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Output of the exact oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustSolution {
    pub q_star: QTable,
    /// `v_star[h][s] = max_a q_star(h, s, a)`
    pub v_star: Vec<Vec<f64>>,
    pub greedy: Policy,
    pub sweeps: usize,
    pub residual: f64,
    pub v_max: f64,
}

impl RobustSolution {
    fn from_q(q_star: QTable, sweeps: usize, residual: f64, v_max: f64) -> Self {
        let v_star = (0..q_star.n_steps).map(|h| q_star.state_values(h)).collect();
        let greedy = q_star.greedy_policy();
        RobustSolution { q_star, v_star, greedy, sweeps, residual, v_max }
    }

    /// Σ_s d0(s) V*(s) at the first step.
    pub fn value(&self, d0: &[f64]) -> f64 {
        dot(d0, &self.v_star[0])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solutions serialize")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Primal brute force
// ---------------------------------------------------------------------------

/// A grid minimizer of the primal inner problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GridArgmin {
    pub value: f64,
    /// Worst-case probabilities on the nominal support, in index order.
    pub support: Vec<usize>,
    pub probabilities: Vec<f64>,
    /// Mass moved to a zero-valued point outside the support (TV only).
    pub grounded_mass: f64,
}

/// min over the simplex grid (step 1/resolution) on the nominal support of
/// E_P[v] + λ D_φ(P, P⁰). Two lattices are searched: multiples of the step,
/// and the same lattice translated to pass through P⁰.
///
/// For TV the grid also carries one zero-valued point outside the support
/// (the fail state), to which the adversary may move mass at the recession
/// cost 1/2 per unit. λ = 0 keeps only the support constraint of φ.
pub fn primal_inner_grid(
    div: PhiDivergence,
    lambda: f64,
    values: &[f64],
    nominal: &[f64],
    resolution: usize,
) -> Result<f64> {
    Ok(primal_inner_grid_argmin(div, lambda, values, nominal, resolution)?.value)
}

/// [`primal_inner_grid`] returning the lowest-lexicographic grid minimizer.
pub fn primal_inner_grid_argmin(
    div: PhiDivergence,
    lambda: f64,
    values: &[f64],
    nominal: &[f64],
    resolution: usize,
) -> Result<GridArgmin> {
    if values.len() != nominal.len() {
        return Err(RrlError::ShapeMismatch(format!(
            "{} values vs {} nominal probabilities",
            values.len(),
            nominal.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(RrlError::InvalidParameter(format!("lambda = {lambda}")));
    }
    if resolution < GRID_MIN_RESOLUTION {
        return Err(RrlError::InvalidParameter(format!(
            "resolution {resolution} below {GRID_MIN_RESOLUTION}"
        )));
    }
    let support: Vec<usize> = (0..nominal.len()).filter(|&i| nominal[i] > 0.0).collect();
    if support.len() > GRID_MAX_SUPPORT {
        return Err(RrlError::UnsupportedSize(support.len()));
    }
    if support.is_empty() {
        return Err(RrlError::Empty("nominal support".into()));
    }
    let grounded = matches!(div, PhiDivergence::Tv);
    let res = resolution;
    let step = 1.0 / res as f64;
    let cost = |i: usize, p: f64| -> f64 {
        let (v, q) = (values[i], nominal[i]);
        let penalty = match div.phi(p / q) {
            ExtendedReal::Finite(x) => q * x,
            ExtendedReal::PlusInfinity => return f64::INFINITY,
        };
        p * v + if lambda == 0.0 { 0.0 } else { lambda * penalty }
    };
    let grounded_table = || -> Vec<f64> {
        let slope = div.recession_slope().to_f64();
        (0..=res).map(|m| lambda * slope * m as f64 * step).collect()
    };

    // Lattice A: masses m/res. Lattice B: masses P⁰_i + j/res, which
    // contains the nominal point itself. Both consist of feasible points,
    // so the smaller minimum is still a primal upper bound.
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for anchored in [false, true] {
        let mut probs: Vec<Vec<f64>> = support
            .iter()
            .map(|&i| {
                if anchored {
                    let below = (nominal[i] * res as f64).floor() as usize;
                    let above = ((1.0 - nominal[i]) * res as f64).floor() as usize;
                    (0..=below + above)
                        .map(|u| (nominal[i] + (u as f64 - below as f64) * step).max(0.0))
                        .collect()
                } else {
                    (0..=res).map(|m| m as f64 * step).collect()
                }
            })
            .collect();
        let mut tables: Vec<Vec<f64>> =
            support.iter().zip(&probs).map(|(&i, ps)| ps.iter().map(|&p| cost(i, p)).collect()).collect();
        // units that sum to the target: the mass below each anchor, or res
        let target = if anchored {
            support.iter().map(|&i| (nominal[i] * res as f64).floor() as usize).sum()
        } else {
            res
        };
        if grounded {
            tables.push(grounded_table());
            probs.push((0..=res).map(|m| m as f64 * step).collect());
        }
        let Some((value, units)) = min_plus_split(&tables, target) else {
            continue;
        };
        let mut p: Vec<f64> = units.iter().zip(&probs).map(|(&u, ps)| ps[u]).collect();
        let g = if grounded { p.pop().unwrap() } else { 0.0 };
        if best.as_ref().is_none_or(|b| value < b.0) {
            best = Some((value, p, g));
        }
    }
    let (value, probabilities, grounded_mass) = best.ok_or_else(|| {
        RrlError::InvalidParameter("no feasible grid point (resolution too coarse for the divergence)".into())
    })?;
    Ok(GridArgmin { value, support, probabilities, grounded_mass })
}

/// Minimizes Σ_j tables[j][u_j] subject to Σ_j u_j = target, returning the
/// minimum and the lowest-lexicographic minimizer (smallest u first).
fn min_plus_split(tables: &[Vec<f64>], target: usize) -> Option<(f64, Vec<usize>)> {
    let k = tables.len();
    // suffix[j][m] = min cost of spreading m units over coordinates j..
    let mut suffix: Vec<Vec<f64>> = vec![Vec::new(); k + 1];
    suffix[k] = (0..=target).map(|m| if m == 0 { 0.0 } else { f64::INFINITY }).collect();
    for j in (0..k).rev() {
        let t = &tables[j];
        let next = &suffix[j + 1];
        suffix[j] = (0..=target)
            .map(|m| (0..=m.min(t.len() - 1)).map(|x| t[x] + next[m - x]).fold(f64::INFINITY, f64::min))
            .collect();
    }
    let best = suffix[0][target];
    if !best.is_finite() {
        return None;
    }
    let mut remaining = target;
    let mut units = Vec::with_capacity(k);
    let mut total = 0.0;
    for j in 0..k {
        let t = &tables[j];
        let here = (0..=remaining.min(t.len() - 1))
            .map(|x| t[x] + suffix[j + 1][remaining - x])
            .fold(f64::INFINITY, f64::min);
        let x = (0..=remaining.min(t.len() - 1))
            .find(|&x| t[x] + suffix[j + 1][remaining - x] == here)
            .expect("minimum is attained");
        total += t[x];
        units.push(x);
        remaining -= x;
    }
    Some((total, units))
}

/// The grid worst-case next-state distribution, as a full row. TV's grounded
/// mass goes to `fail_state`.
pub fn worst_case_row(
    div: PhiDivergence,
    lambda: f64,
    values: &[f64],
    nominal: &[f64],
    resolution: usize,
    fail_state: Option<usize>,
) -> Result<Vec<f64>> {
    let arg = primal_inner_grid_argmin(div, lambda, values, nominal, resolution)?;
    let mut row = vec![0.0; nominal.len()];
    for (&i, &p) in arg.support.iter().zip(&arg.probabilities) {
        row[i] = p;
    }
    if arg.grounded_mass > 0.0 {
        let f = fail_state.ok_or_else(|| RrlError::FailState {
            state: usize::MAX,
            reason: "TV worst case moves mass to a fail state, but none is declared".into(),
        })?;
        row[f] += arg.grounded_mass;
    }
    Ok(row)
}

// ---------------------------------------------------------------------------
// Bellman operators
// ---------------------------------------------------------------------------

/// How the next-state expectation is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerOperator {
    /// Regularized worst case inf_P E_P[v] + λ D_φ(P, P⁰).
    Robust { div: PhiDivergence, lambda: f64 },
    /// Plain expectation under P⁰.
    Nominal,
}

impl InnerOperator {
    pub fn robust(div: PhiDivergence, lambda: f64) -> Self {
        InnerOperator::Robust { div, lambda }
    }

    /// The inner value for `values` under the transition row `row`.
    pub fn apply(&self, values: &[f64], row: &[f64]) -> Result<f64> {
        match *self {
            InnerOperator::Nominal => Ok(dot(values, row)),
            InnerOperator::Robust { div, lambda } => {
                let wv = WeightedValues::new(values.to_vec(), row.to_vec())?;
                Ok(solve_inner_exact(div, lambda, &wv, DEFAULT_TOL)?.inner_value)
            }
        }
    }

    fn is_tv(&self) -> bool {
        matches!(self, InnerOperator::Robust { div: PhiDivergence::Tv, .. })
    }
}

/// Oracle knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Sup-norm residual target.
    pub tol: f64,
    /// Accept TV on models without a fail state.
    pub allow_ungrounded_tv: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { tol: 1e-8, allow_ungrounded_tv: false }
    }
}

impl OracleOptions {
    pub fn with_tol(tol: f64) -> Self {
        OracleOptions { tol, ..Default::default() }
    }
}

fn check_grounding(op: &InnerOperator, grounded: bool, opts: &OracleOptions) -> Result<()> {
    if op.is_tv() && !grounded && !opts.allow_ungrounded_tv {
        return Err(RrlError::FailState {
            state: usize::MAX,
            reason: "TV regularization requires a declared fail state (or an explicit override)".into(),
        });
    }
    Ok(())
}

/// Next-state values used by the backup: max_a Q, or the policy average.
fn next_values(q: &QTable, h: usize, policy: Option<&Policy>) -> Vec<f64> {
    match policy {
        None => q.state_values(h),
        Some(pi) => q.policy_state_values(h, pi),
    }
}

/// One backup of every cell: Q′(s,a) = clip(r(s,a) + γ·inner(V), 0, Vmax).
fn discounted_backup(mdp: &TabularMdp, op: &InnerOperator, q: &QTable, policy: Option<&Policy>) -> Result<QTable> {
    let v = next_values(q, 0, policy);
    let v_max = mdp.v_max();
    let mut out = QTable::zeros(1, mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let inner = op
                .apply(&v, mdp.row(s, a))
                .map_err(|e| e.context(format!("cell (s={s}, a={a})")))?;
            out.set(0, s, a, (mdp.reward(s, a) + mdp.gamma * inner).clamp(0.0, v_max));
        }
    }
    Ok(out)
}

fn check_q_shape(mdp: &TabularMdp, q: &QTable) -> Result<()> {
    if q.n_steps != 1 || q.n_states != mdp.n_states || q.n_actions != mdp.n_actions {
        return Err(RrlError::ShapeMismatch(format!(
            "Q table {}x{}x{} for a {}x{} model",
            q.n_steps, q.n_states, q.n_actions, mdp.n_states, mdp.n_actions
        )));
    }
    Ok(())
}

/// The robust regularized Bellman optimality operator, via the dual per cell.
pub fn robust_bellman_apply(mdp: &TabularMdp, div: PhiDivergence, lambda: f64, q: &QTable) -> Result<QTable> {
    check_q_shape(mdp, q)?;
    discounted_backup(mdp, &InnerOperator::robust(div, lambda), q, None)
}

/// The same operator evaluated with the primal grid oracle per cell.
pub fn robust_bellman_apply_grid(
    mdp: &TabularMdp,
    div: PhiDivergence,
    lambda: f64,
    q: &QTable,
    resolution: usize,
) -> Result<QTable> {
    check_q_shape(mdp, q)?;
    let v = q.state_values(0);
    let mut out = QTable::zeros(1, mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let inner = primal_inner_grid(div, lambda, &v, mdp.row(s, a), resolution)?;
            out.set(0, s, a, (mdp.reward(s, a) + mdp.gamma * inner).clamp(0.0, mdp.v_max()));
        }
    }
    Ok(out)
}

/// ceil(log(Vmax/tol)/log(1/γ)) + 1.
pub fn sweep_cap(gamma: f64, v_max: f64, tol: f64) -> usize {
    ((v_max / tol).ln() / (1.0 / gamma).ln()).ceil().max(0.0) as usize + 1
}

/// Iterates a γ-contraction from Q ≡ 0 until the sup-norm change is at most
/// tol·(1 − γ), which places the iterate within tol·γ of the fixed point.
fn iterate_to_fixed_point(
    mdp: &TabularMdp,
    op: &InnerOperator,
    policy: Option<&Policy>,
    tol: f64,
) -> Result<(QTable, usize, f64)> {
    if !(tol > 0.0) {
        return Err(RrlError::InvalidParameter(format!("tol = {tol} must be positive")));
    }
    let cap = sweep_cap(mdp.gamma, mdp.v_max(), tol);
    let target = tol * (1.0 - mdp.gamma);
    let mut q = QTable::zeros(1, mdp.n_states, mdp.n_actions);
    for sweep in 1..=cap {
        let next = discounted_backup(mdp, op, &q, policy)?;
        let residual = next.sup_distance(&q);
        q = next;
        if residual <= target {
            return Ok((q, sweep, residual));
        }
    }
    let residual = discounted_backup(mdp, op, &q, policy)?.sup_distance(&q);
    Err(RrlError::NonConvergence { iterations: cap, residual })
}

/// Robust Q-iteration Q_{k+1} = T Q_k from Q₀ ≡ 0.
pub fn robust_value_iteration(mdp: &TabularMdp, div: PhiDivergence, lambda: f64, tol: f64) -> Result<RobustSolution> {
    robust_value_iteration_with(mdp, div, lambda, &OracleOptions::with_tol(tol))
}

pub fn robust_value_iteration_with(
    mdp: &TabularMdp,
    div: PhiDivergence,
    lambda: f64,
    opts: &OracleOptions,
) -> Result<RobustSolution> {
    let op = InnerOperator::robust(div, lambda);
    check_grounding(&op, mdp.fail_state.is_some(), opts)?;
    let (q, sweeps, residual) = iterate_to_fixed_point(mdp, &op, None, opts.tol)?;
    Ok(RobustSolution::from_q(q, sweeps, residual, mdp.v_max()))
}

/// Non-robust value iteration under P⁰.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<RobustSolution> {
    let (q, sweeps, residual) = iterate_to_fixed_point(mdp, &InnerOperator::Nominal, None, tol)?;
    Ok(RobustSolution::from_q(q, sweeps, residual, mdp.v_max()))
}

fn check_stationary(mdp: &TabularMdp, policy: &Policy) -> Result<()> {
    policy.validate(mdp.n_states, mdp.n_actions, None)?;
    if policy.is_mixture() || !policy.is_stationary() {
        return Err(RrlError::InvalidParameter(
            "policy evaluation needs a stationary non-mixture policy".into(),
        ));
    }
    Ok(())
}

/// Q^π_λ, the fixed point of Q ↦ r + γ·inner(Σ_a π(a|·) Q(·, a)).
pub fn robust_policy_evaluation(
    mdp: &TabularMdp,
    policy: &Policy,
    div: PhiDivergence,
    lambda: f64,
    tol: f64,
) -> Result<QTable> {
    robust_policy_evaluation_with(mdp, policy, div, lambda, &OracleOptions::with_tol(tol))
}

pub fn robust_policy_evaluation_with(
    mdp: &TabularMdp,
    policy: &Policy,
    div: PhiDivergence,
    lambda: f64,
    opts: &OracleOptions,
) -> Result<QTable> {
    check_stationary(mdp, policy)?;
    let op = InnerOperator::robust(div, lambda);
    check_grounding(&op, mdp.fail_state.is_some(), opts)?;
    Ok(iterate_to_fixed_point(mdp, &op, Some(policy), opts.tol)?.0)
}

/// Non-robust Q^π under P⁰.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &Policy, tol: f64) -> Result<QTable> {
    check_stationary(mdp, policy)?;
    Ok(iterate_to_fixed_point(mdp, &InnerOperator::Nominal, Some(policy), tol)?.0)
}

/// Robust value Σ_s d0(s) V^π_λ(s). A mixture scores the weighted mean of
/// its members' robust values (one member is followed per episode).
pub fn robust_policy_value(
    mdp: &TabularMdp,
    policy: &Policy,
    div: PhiDivergence,
    lambda: f64,
    opts: &OracleOptions,
) -> Result<f64> {
    if let Policy::Mixture { members, weights } = policy {
        let mut total = 0.0;
        for (m, w) in members.iter().zip(weights) {
            total += w * robust_policy_value(mdp, m, div, lambda, opts)?;
        }
        return Ok(total);
    }
    let q = robust_policy_evaluation_with(mdp, policy, div, lambda, opts)?;
    Ok(dot(&mdp.d0, &q.policy_state_values(0, policy)))
}

/// A model whose rows are the grid worst cases against next-state values `v`.
pub fn worst_case_model(
    mdp: &TabularMdp,
    div: PhiDivergence,
    lambda: f64,
    v: &[f64],
    resolution: usize,
) -> Result<TabularMdp> {
    let mut out = mdp.clone();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let row = worst_case_row(div, lambda, v, mdp.row(s, a), resolution, mdp.fail_state)?;
            out.transitions[mdp.cell(s, a)] = row;
        }
    }
    out.validate().map_err(|e| e.context("worst-case model"))?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finite horizon
// ---------------------------------------------------------------------------

fn fh_backward(
    mdp: &FiniteHorizonMdp,
    op: &InnerOperator,
    policy: Option<&Policy>,
) -> Result<QTable> {
    let h_max = mdp.horizon;
    let v_max = mdp.v_max();
    let mut q = QTable::zeros(h_max, mdp.n_states, mdp.n_actions);
    let mut v_next = vec![0.0; mdp.n_states];
    for h in (0..h_max).rev() {
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let inner = op
                    .apply(&v_next, mdp.row(h, s, a))
                    .map_err(|e| e.context(format!("step {h}, cell (s={s}, a={a})")))?;
                q.set(h, s, a, (mdp.reward(h, s, a) + inner).clamp(0.0, v_max));
            }
        }
        v_next = next_values(&q, h, policy);
    }
    Ok(q)
}

fn check_fh_policy(mdp: &FiniteHorizonMdp, policy: &Policy) -> Result<()> {
    policy.validate(mdp.n_states, mdp.n_actions, Some(mdp.horizon))?;
    if policy.is_mixture() {
        return Err(RrlError::InvalidParameter(
            "mixtures have no Q table; score them with robust_policy_value_fh".into(),
        ));
    }
    Ok(())
}

/// Backward induction Q*_H = 0, Q*_h = r_h + inner_h(V*_{h+1}).
pub fn robust_dp_finite_horizon(mdp: &FiniteHorizonMdp, div: PhiDivergence, lambda: f64) -> Result<RobustSolution> {
    robust_dp_finite_horizon_with(mdp, div, lambda, &OracleOptions::default())
}

pub fn robust_dp_finite_horizon_with(
    mdp: &FiniteHorizonMdp,
    div: PhiDivergence,
    lambda: f64,
    opts: &OracleOptions,
) -> Result<RobustSolution> {
    let op = InnerOperator::robust(div, lambda);
    check_grounding(&op, mdp.has_fail_states(), opts)?;
    let q = fh_backward(mdp, &op, None)?;
    Ok(RobustSolution::from_q(q, mdp.horizon, 0.0, mdp.v_max()))
}

/// Non-robust backward induction under P⁰.
pub fn backward_induction(mdp: &FiniteHorizonMdp) -> Result<RobustSolution> {
    let q = fh_backward(mdp, &InnerOperator::Nominal, None)?;
    Ok(RobustSolution::from_q(q, mdp.horizon, 0.0, mdp.v_max()))
}

/// Q^π_{λ,h} for a non-mixture policy.
pub fn robust_policy_evaluation_fh(
    mdp: &FiniteHorizonMdp,
    policy: &Policy,
    div: PhiDivergence,
    lambda: f64,
) -> Result<QTable> {
    robust_policy_evaluation_fh_with(mdp, policy, div, lambda, &OracleOptions::default())
}

pub fn robust_policy_evaluation_fh_with(
    mdp: &FiniteHorizonMdp,
    policy: &Policy,
    div: PhiDivergence,
    lambda: f64,
    opts: &OracleOptions,
) -> Result<QTable> {
    check_fh_policy(mdp, policy)?;
    let op = InnerOperator::robust(div, lambda);
    check_grounding(&op, mdp.has_fail_states(), opts)?;
    fh_backward(mdp, &op, Some(policy))
}

/// Non-robust finite-horizon policy evaluation.
pub fn policy_evaluation_fh(mdp: &FiniteHorizonMdp, policy: &Policy) -> Result<QTable> {
    check_fh_policy(mdp, policy)?;
    fh_backward(mdp, &InnerOperator::Nominal, Some(policy))
}

/// Robust value Σ_s d0(s) V^π_{λ,0}(s); mixtures score the weighted mean of
/// their members.
pub fn robust_policy_value_fh(mdp: &FiniteHorizonMdp, policy: &Policy, div: PhiDivergence, lambda: f64) -> Result<f64> {
    if let Policy::Mixture { members, weights } = policy {
        let mut total = 0.0;
        for (m, w) in members.iter().zip(weights) {
            total += w * robust_policy_value_fh(mdp, m, div, lambda)?;
        }
        return Ok(total);
    }
    let q = robust_policy_evaluation_fh(mdp, policy, div, lambda)?;
    Ok(dot(&mdp.d0, &q.policy_state_values(0, policy)))
}

/// Per-step grid worst-case model against values `v[h]` of step h + 1
/// (`v.len() == horizon`, the last entry being zeros).
pub fn worst_case_model_fh(
    mdp: &FiniteHorizonMdp,
    div: PhiDivergence,
    lambda: f64,
    v_next: &[Vec<f64>],
    resolution: usize,
) -> Result<FiniteHorizonMdp> {
    if v_next.len() != mdp.horizon {
        return Err(RrlError::ShapeMismatch(format!("{} value vectors for horizon {}", v_next.len(), mdp.horizon)));
    }
    let mut out = mdp.clone();
    for h in 0..mdp.horizon {
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                out.transitions[h][mdp.cell(s, a)] =
                    worst_case_row(div, lambda, &v_next[h], mdp.row(h, s, a), resolution, mdp.fail_state(h))?;
            }
        }
    }
    out.validate().map_err(|e| e.context("worst-case model"))?;
    Ok(out)
}

/// The next-step values V^π_{h+1} used by [`worst_case_model_fh`].
pub fn next_step_values(q: &QTable, policy: &Policy) -> Vec<Vec<f64>> {
    (0..q.n_steps)
        .map(|h| {
            if h + 1 < q.n_steps {
                q.policy_state_values(h + 1, policy)
            } else {
                vec![0.0; q.n_states]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::generators::{garnet, loop_exit, single_state, GarnetParams};
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_examples() {
        let v = [0.0, 1.0];
        let w = [0.5, 0.5];
        let tv = primal_inner_grid(PhiDivergence::Tv, 1.0, &v, &w, 1000).unwrap();
        assert_abs_diff_eq!(tv, 0.5, epsilon = 2e-3);
        let chi = primal_inner_grid(PhiDivergence::ChiSquare, 1.0, &v, &w, 1000).unwrap();
        assert_abs_diff_eq!(chi, 0.4375, epsilon = 2e-3);
        let zero = primal_inner_grid(PhiDivergence::Tv, 0.0, &v, &w, 1000).unwrap();
        assert_abs_diff_eq!(zero, 0.0, epsilon = 1e-15);
        let kl = primal_inner_grid(PhiDivergence::Kl, 1.0, &v, &w, 1000).unwrap();
        assert_abs_diff_eq!(kl, 0.379885, epsilon = 2e-3);
        let cvar = primal_inner_grid(PhiDivergence::Cvar { alpha: 0.8 }, 1.0, &v, &w, 1000).unwrap();
        assert_abs_diff_eq!(cvar, 0.375, epsilon = 2e-3);
    }

    #[test]
    fn grid_rejects_large_support_and_coarse_grids() {
        let v = [0.0; 5];
        let w = [0.2; 5];
        assert_eq!(
            primal_inner_grid(PhiDivergence::Kl, 1.0, &v, &w, 100).unwrap_err(),
            RrlError::UnsupportedSize(5)
        );
        assert!(primal_inner_grid(PhiDivergence::Kl, 1.0, &v[..2], &[0.5, 0.5], 50).is_err());
    }

    #[test]
    fn grid_argmin_chi_square() {
        let arg = primal_inner_grid_argmin(PhiDivergence::ChiSquare, 1.0, &[0.0, 1.0], &[0.5, 0.5], 1000).unwrap();
        assert_abs_diff_eq!(arg.probabilities[1], 0.375, epsilon = 1e-12);
        assert_eq!(arg.grounded_mass, 0.0);
    }

    #[test]
    fn tv_grounding_moves_mass_to_fail_state() {
        // no zero value in the support: worst case moves mass off-support
        let row = worst_case_row(PhiDivergence::Tv, 0.2, &[0.0, 1.0, 1.0], &[0.0, 0.5, 0.5], 1000, Some(0)).unwrap();
        assert_abs_diff_eq!(row[0], 1.0, epsilon = 1e-12);
        // all mass grounded: 0 + λ·TV = λ = E min(v, λ)
        let v = primal_inner_grid(PhiDivergence::Tv, 0.2, &[1.0, 1.0], &[0.5, 0.5], 1000).unwrap();
        assert_abs_diff_eq!(v, 0.2, epsilon = 1e-12);
        assert!(worst_case_row(PhiDivergence::Tv, 0.2, &[1.0, 1.0], &[0.5, 0.5], 1000, None).is_err());
    }

    #[test]
    fn single_state_fixed_point() {
        let m = single_state(1.0, 0.5).unwrap();
        for div in [PhiDivergence::ChiSquare, PhiDivergence::Kl, PhiDivergence::Cvar { alpha: 0.5 }] {
            let sol = robust_value_iteration(&m, div, 1.0, 1e-10).unwrap();
            assert_abs_diff_eq!(sol.q_star.get(0, 0, 0), 2.0, epsilon = 1e-9);
        }
        let opts = OracleOptions { tol: 1e-10, allow_ungrounded_tv: true };
        let sol = robust_value_iteration_with(&m, PhiDivergence::Tv, 1.0, &opts).unwrap();
        // TV grounding: inner = E min(v, λ) = 1, so Q = 1 + 0.5
        assert_abs_diff_eq!(sol.q_star.get(0, 0, 0), 1.5, epsilon = 1e-9);
        assert!(robust_value_iteration(&m, PhiDivergence::Tv, 1.0, 1e-10).is_err());
    }

    #[test]
    fn first_application_on_zero_gives_rewards() {
        let m = loop_exit(0.9).unwrap();
        let q = robust_bellman_apply(&m, PhiDivergence::Tv, 1.0, &QTable::zeros(1, 2, 2)).unwrap();
        assert_eq!(q.values, m.rewards);
    }

    #[test]
    fn contraction_and_monotonicity() {
        let m = garnet(&GarnetParams { seed: 2, ..GarnetParams::new(4, 2) }).unwrap();
        let vmax = m.v_max();
        for div in [PhiDivergence::Tv, PhiDivergence::ChiSquare, PhiDivergence::Kl, PhiDivergence::Cvar { alpha: 0.3 }] {
            for i in 0..10 {
                let q1 = QTable::from_cells(5, 2, (0..10).map(|j| ((i * 7 + j * 3) % 11) as f64 / 11.0 * vmax).collect()).unwrap();
                let q2 = QTable::from_cells(5, 2, (0..10).map(|j| ((i * 5 + j * 2) % 13) as f64 / 13.0 * vmax).collect()).unwrap();
                let t1 = robust_bellman_apply(&m, div, 1.0, &q1).unwrap();
                let t2 = robust_bellman_apply(&m, div, 1.0, &q2).unwrap();
                assert!(t1.sup_distance(&t2) <= m.gamma * q1.sup_distance(&q2) + 1e-9);
                let hi = QTable::from_cells(5, 2, q1.values.iter().zip(&q2.values).map(|(a, b)| a.max(*b)).collect()).unwrap();
                let th = robust_bellman_apply(&m, div, 1.0, &hi).unwrap();
                for (x, y) in t1.values.iter().zip(&th.values) {
                    assert!(x <= &(y + 1e-9));
                }
            }
        }
    }

    #[test]
    fn dual_and_grid_backups_agree() {
        let m = garnet(&GarnetParams { seed: 5, branching: 2, ..GarnetParams::new(4, 2) }).unwrap();
        let q = QTable::from_cells(5, 2, (0..10).map(|j| (j as f64 * 0.37) % 3.0).collect()).unwrap();
        for div in [PhiDivergence::Tv, PhiDivergence::ChiSquare, PhiDivergence::Kl, PhiDivergence::Cvar { alpha: 0.5 }] {
            let dual = robust_bellman_apply(&m, div, 1.0, &q).unwrap();
            let grid = robust_bellman_apply_grid(&m, div, 1.0, &q, 1000).unwrap();
            assert!(dual.sup_distance(&grid) <= 5e-3, "{div}: {}", dual.sup_distance(&grid));
        }
    }

    #[test]
    fn value_iteration_respects_cap_and_greedy_is_optimal() {
        let m = garnet(&GarnetParams { seed: 9, ..GarnetParams::new(5, 2) }).unwrap();
        for div in [PhiDivergence::Tv, PhiDivergence::ChiSquare, PhiDivergence::Kl, PhiDivergence::Cvar { alpha: 0.5 }] {
            let sol = robust_value_iteration(&m, div, 1.0, 1e-8).unwrap();
            assert!(sol.residual <= 1e-8);
            assert!(sol.sweeps <= sweep_cap(m.gamma, m.v_max(), 1e-8));
            let q_pi = robust_policy_evaluation(&m, &sol.greedy, div, 1.0, 1e-8).unwrap();
            assert!(q_pi.sup_distance(&sol.q_star) <= 2e-8, "{div}");
            let nominal = policy_evaluation(&m, &sol.greedy, 1e-8).unwrap();
            for (r, n) in q_pi.values.iter().zip(&nominal.values) {
                assert!(*r <= n + 1e-9);
            }
        }
    }

    #[test]
    fn large_lambda_recovers_nominal_and_values_shrink_with_lambda() {
        let m = garnet(&GarnetParams { seed: 1, ..GarnetParams::new(5, 2) }).unwrap();
        let nominal = value_iteration(&m, 1e-8).unwrap();
        for div in [PhiDivergence::Tv, PhiDivergence::ChiSquare, PhiDivergence::Kl] {
            let robust = robust_value_iteration(&m, div, 1e4, 1e-8).unwrap();
            assert!(robust.q_star.sup_distance(&nominal.q_star) <= 1e-2, "{div}");
            let mut prev = f64::INFINITY;
            for lambda in [10.0, 1.0, 0.1, 0.01] {
                let v = robust_value_iteration(&m, div, lambda, 1e-8).unwrap().value(&m.d0);
                assert!(v <= prev + 1e-9);
                prev = v;
            }
        }
        let tv_small = robust_value_iteration(&m, PhiDivergence::Tv, 1e-3, 1e-8).unwrap();
        assert!(tv_small.q_star.values.iter().all(|q| *q <= 1.0 + 1e-3 * 10.0 + 1e-9));
    }

    #[test]
    fn finite_horizon_dp() {
        let m = garnet(&GarnetParams { seed: 4, ..GarnetParams::new(3, 2) }).unwrap().to_finite_horizon(1);
        let sol = robust_dp_finite_horizon(&m, PhiDivergence::Tv, 1.0).unwrap();
        assert_eq!(sol.q_star.step(0), &m.rewards[0][..]);
        let m2 = garnet(&GarnetParams { seed: 4, ..GarnetParams::new(3, 2) }).unwrap().to_finite_horizon(2);
        let sol = robust_dp_finite_horizon(&m2, PhiDivergence::Tv, 1.0).unwrap();
        let v1 = sol.v_star[1].clone();
        for s in 0..m2.n_states {
            for a in 0..2 {
                let grid = primal_inner_grid(PhiDivergence::Tv, 1.0, &v1, m2.row(0, s, a), 1000).unwrap();
                assert_abs_diff_eq!(sol.q_star.get(0, s, a), m2.reward(0, s, a) + grid, epsilon = 5e-3);
            }
        }
        let nominal = backward_induction(&m2).unwrap();
        let big = robust_dp_finite_horizon(&m2, PhiDivergence::Kl, 1e4).unwrap();
        assert!(big.q_star.sup_distance(&nominal.q_star) <= 1e-2);
        let q_pi = robust_policy_evaluation_fh(&m2, &sol.greedy, PhiDivergence::Tv, 1.0).unwrap();
        assert!(q_pi.sup_distance(&sol.q_star) <= 1e-12);
        let mix = Policy::Mixture { members: vec![sol.greedy.clone()], weights: vec![1.0] };
        assert!(robust_policy_evaluation_fh(&m2, &mix, PhiDivergence::Tv, 1.0).is_err());
        assert_abs_diff_eq!(
            robust_policy_value_fh(&m2, &mix, PhiDivergence::Tv, 1.0).unwrap(),
            sol.value(&m2.d0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn solution_serializes() {
        let m = loop_exit(0.9).unwrap();
        let sol = robust_value_iteration(&m, PhiDivergence::Kl, 1.0, 1e-8).unwrap();
        let json = sol.to_json();
        let back: RobustSolution = serde_json::from_str(&json).unwrap();
        assert_eq!(back.greedy, sol.greedy);
    }
}
