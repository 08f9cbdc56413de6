//! Offline robust φ-regularized fitted Q-iteration (discounted setting).
//!
//! Each iteration first fits a dual-variable function g_k by empirical risk
//! minimization of the dual loss against the current next-state values
//! max_a′ Q_k(s′, a′), then regresses Q_{k+1} onto the targets
//! r − γλφ*((g_k − max_a′ Q_k(s′, a′))/λ) + γ g_k.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::divergence::{DualDomain, PhiDivergence};
use crate::error::{Result, RrlError};
use crate::function_class::{
    erm_dual_fit, least_squares_fit, DualFunction, DualLoss, ErmOptions, FunctionClass, Input, QFunction, Ridge,
};
use crate::mdp::{Policy, TransitionDataset};

/// Configuration of one RPQ run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpqConfig {
    #[serde(flatten)]
    pub divergence: PhiDivergence,
    pub lambda: f64,
    pub gamma: f64,
    /// K; `None` selects [`default_iterations`] from the dataset size.
    pub iterations: Option<usize>,
    pub f_class: FunctionClass,
    pub g_class: FunctionClass,
    #[serde(default)]
    pub ridge: Ridge,
    #[serde(default)]
    pub erm: ErmOptions,
    /// Clip regression targets to [−c₁, 1 + γc₁].
    #[serde(default = "default_true")]
    pub clip_targets: bool,
    /// Fail state of the model the data came from (required for TV).
    pub fail_state: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl RpqConfig {
    /// Tabular F and G over an n_states × n_actions model.
    pub fn tabular(
        divergence: PhiDivergence,
        lambda: f64,
        gamma: f64,
        n_states: usize,
        n_actions: usize,
        fail_state: Option<usize>,
    ) -> Self {
        RpqConfig {
            divergence,
            lambda,
            gamma,
            iterations: None,
            f_class: FunctionClass::tabular(1, n_states, n_actions),
            g_class: FunctionClass::tabular(1, n_states, n_actions),
            ridge: Ridge::Auto,
            erm: ErmOptions::default(),
            clip_targets: true,
            fail_state,
        }
    }

    pub fn v_max(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }

    pub fn dual_loss(&self) -> DualLoss {
        DualLoss::Phi { div: self.divergence, lambda: self.lambda }
    }

    pub fn dual_domain(&self) -> Result<DualDomain> {
        self.divergence.dual_domain(self.lambda, self.v_max())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(RrlError::InvalidParameter(format!("gamma = {}", self.gamma)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(RrlError::InvalidParameter(format!("lambda = {}", self.lambda)));
        }
        if self.iterations == Some(0) {
            return Err(RrlError::InvalidParameter("K must be at least 1".into()));
        }
        if matches!(self.divergence, PhiDivergence::Tv) && self.fail_state.is_none() {
            return Err(RrlError::FailState {
                state: usize::MAX,
                reason: "TV regularization requires the model to declare a fail state".into(),
            });
        }
        if self.f_class.shape() != self.g_class.shape() || self.f_class.shape().0 != 1 {
            return Err(RrlError::ShapeMismatch("F and G must share a single-step (s, a) domain".into()));
        }
        Ok(())
    }
}

/// K = ceil(log N / (2 log(1/γ))), at least 1.
pub fn default_iterations(n: usize, gamma: f64) -> usize {
    let k = ((n.max(2) as f64).ln() / (2.0 * (1.0 / gamma).ln())).ceil();
    (k as usize).max(1)
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpqTraceRow {
    pub iteration: usize,
    pub dual_loss: f64,
    pub robq_loss: f64,
    /// ‖Q_{k+1} − Q_k‖∞ over the (s, a) pairs present in the data.
    pub sup_change: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RpqTrace {
    pub rows: Vec<RpqTraceRow>,
}

impl RpqTrace {
    /// CSV with header `iteration,dual_loss,robq_loss,sup_change,wall_ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,dual_loss,robq_loss,sup_change,wall_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.dual_loss, r.robq_loss, r.sup_change, r.wall_ms
            ));
        }
        out
    }

    /// The trace without wall-clock times (for determinism checks).
    pub fn numeric(&self) -> Vec<(usize, f64, f64, f64)> {
        self.rows.iter().map(|r| (r.iteration, r.dual_loss, r.robq_loss, r.sup_change)).collect()
    }
}

/// Output of [`rpq_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpqOutput {
    pub policy: Policy,
    pub trace: RpqTrace,
    pub q: QFunction,
    pub iterations: usize,
}

/// Per-record inputs, rewards, weights and next-state values max_a′ f(s′, a′).
struct Columns {
    inputs: Vec<Input>,
    rewards: Vec<f64>,
    weights: Vec<f64>,
    next_values: Vec<f64>,
}

fn columns(f: &QFunction, dataset: &TransitionDataset) -> Columns {
    let n = dataset.len();
    let mut c = Columns {
        inputs: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        next_values: Vec::with_capacity(n),
    };
    for r in dataset {
        c.inputs.push((0, r.s, r.a));
        c.rewards.push(r.r);
        c.weights.push(r.weight);
        c.next_values.push(f.state_value(0, r.sp));
    }
    c
}

fn weighted_mean(values: impl Iterator<Item = f64>, weights: &[f64]) -> f64 {
    let (num, den) = values.zip(weights).fold((0.0, 0.0), |(n, d), (v, w)| (n + w * v, d + w));
    num / den
}

/// Mean over records of λφ*((g(s,a) − max_a′ f(s′,a′))/λ) − g(s,a).
pub fn empirical_dual_loss(
    g: &DualFunction,
    f: &QFunction,
    dataset: &TransitionDataset,
    div: PhiDivergence,
    lambda: f64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(RrlError::Empty("dataset".into()));
    }
    let loss = DualLoss::Phi { div, lambda };
    let c = columns(f, dataset);
    let mut values = Vec::with_capacity(dataset.len());
    for (i, (&(h, s, a), &v)) in c.inputs.iter().zip(&c.next_values).enumerate() {
        values.push(loss.value(g.evaluate(h, s, a), v).map_err(|e| e.context(format!("record {i}")))?);
    }
    Ok(weighted_mean(values.into_iter(), &c.weights))
}

/// Per-record targets r − γλφ*((g − v′)/λ) + γg.
fn targets(g: &DualFunction, c: &Columns, loss: &DualLoss, gamma: f64) -> Result<Vec<f64>> {
    c.inputs
        .iter()
        .zip(&c.next_values)
        .zip(&c.rewards)
        .enumerate()
        .map(|(i, ((&(h, s, a), &v), &r))| {
            let gv = g.evaluate(h, s, a);
            // λφ*((g − v)/λ) = ℓ(g; v) + g
            let conj = loss.value(gv, v).map_err(|e| e.context(format!("record {i}")))? + gv;
            Ok(r - gamma * conj + gamma * gv)
        })
        .collect()
}

/// Mean over records of (r + γg − γλφ*((g − max f)/λ) − Q(s,a))².
pub fn empirical_robq_loss(
    q: &QFunction,
    f: &QFunction,
    g: &DualFunction,
    dataset: &TransitionDataset,
    div: PhiDivergence,
    lambda: f64,
    gamma: f64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(RrlError::Empty("dataset".into()));
    }
    let c = columns(f, dataset);
    let y = targets(g, &c, &DualLoss::Phi { div, lambda }, gamma)?;
    let sq = c.inputs.iter().zip(&y).map(|(&(h, s, a), t)| (t - q.evaluate(h, s, a)).powi(2));
    Ok(weighted_mean(sq, &c.weights))
}

/// One iteration: g_k by dual ERM, then Q_{k+1} by least squares.
pub fn rpq_step(q_k: &QFunction, dataset: &TransitionDataset, config: &RpqConfig) -> Result<(DualFunction, QFunction)> {
    if dataset.is_empty() {
        return Err(RrlError::Empty("dataset".into()));
    }
    let loss = config.dual_loss();
    let domain = config.dual_domain()?;
    let c = columns(q_k, dataset);
    let g = erm_dual_fit(&config.g_class, &c.inputs, &c.next_values, Some(&c.weights), &loss, domain, &config.erm)
        .map_err(|e| e.context("dual ERM"))?;
    let mut y = targets(&g, &c, &loss, config.gamma)?;
    if config.clip_targets {
        let c1 = config.divergence.constants(config.lambda, config.v_max())?.c1;
        let (lo, hi) = (-c1, 1.0 + config.gamma * c1);
        y.iter_mut().for_each(|t| *t = t.clamp(lo, hi));
    }
    let q = least_squares_fit(&config.f_class, &c.inputs, &y, Some(&c.weights), config.ridge, config.v_max())
        .map_err(|e| e.context("least squares"))?;
    Ok((g, q))
}

/// K iterations from Q₀ ≡ 0; returns the greedy policy of Q_K.
pub fn rpq_run(config: &RpqConfig, dataset: &TransitionDataset) -> Result<RpqOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(RrlError::Empty("dataset".into()));
    }
    let (_, ns, na) = config.f_class.shape();
    dataset.validate(ns, na, 1)?;
    let k_total = config.iterations.unwrap_or_else(|| default_iterations(dataset.len(), config.gamma));
    let support: BTreeSet<(usize, usize)> = dataset.iter().map(|r| (r.s, r.a)).collect();
    let mut q = QFunction::zero(config.f_class.clone(), config.v_max());
    let mut trace = RpqTrace::default();
    for k in 0..k_total {
        let start = Instant::now();
        let (g, next) = rpq_step(&q, dataset, config).map_err(|e| e.context(format!("iteration {k}")))?;
        let dual_loss = empirical_dual_loss(&g, &q, dataset, config.divergence, config.lambda)?;
        let robq_loss = empirical_robq_loss(&next, &q, &g, dataset, config.divergence, config.lambda, config.gamma)?;
        let sup_change = support
            .iter()
            .map(|&(s, a)| (next.evaluate(0, s, a) - q.evaluate(0, s, a)).abs())
            .fold(0.0, f64::max);
        q = next;
        trace.rows.push(RpqTraceRow {
            iteration: k + 1,
            dual_loss,
            robq_loss,
            sup_change,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let policy = Policy::StationaryDeterministic((0..ns).map(|s| q.greedy_action(0, s)).collect());
    Ok(RpqOutput { policy, trace, q, iterations: k_total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::generators::{garnet, single_state, GarnetParams};
    use crate::mdp::{exact_dataset, Provenance, TransitionRecord};
    use crate::oracle::{robust_bellman_apply, QTable};
    use approx::assert_abs_diff_eq;

    fn record(s: usize, a: usize, r: f64, sp: usize) -> TransitionRecord {
        TransitionRecord { h: 0, s, a, r, sp, prov: Provenance::Offline, weight: 1.0 }
    }

    #[test]
    fn default_iteration_count() {
        assert_eq!(default_iterations(10_000, 0.9), 44);
        assert_eq!(default_iterations(1, 0.5), 1);
    }

    #[test]
    fn dual_loss_examples() {
        let class = FunctionClass::tabular(1, 2, 1);
        let dom = PhiDivergence::Tv.dual_domain(1.0, 10.0).unwrap();
        let g = DualFunction::new(class.clone(), crate::function_class::Representation::Table(vec![0.5, 0.5]), dom).unwrap();
        let f = QFunction::new(class.clone(), crate::function_class::Representation::Table(vec![0.0, 1.0]), 10.0).unwrap();
        let d = TransitionDataset::new(vec![record(0, 0, 0.0, 1)]);
        // λφ*((0.5 − 1)/1) − 0.5 = −0.5 − 0.5
        assert_abs_diff_eq!(empirical_dual_loss(&g, &f, &d, PhiDivergence::Tv, 1.0).unwrap(), -1.0, epsilon = 1e-15);
        let dd = TransitionDataset::new(vec![record(0, 0, 0.0, 1), record(0, 0, 0.0, 1)]);
        assert_eq!(
            empirical_dual_loss(&g, &f, &d, PhiDivergence::Tv, 1.0).unwrap(),
            empirical_dual_loss(&g, &f, &dd, PhiDivergence::Tv, 1.0).unwrap()
        );
        // KL with g at the domain's lower end and f ≡ 0
        let kdom = PhiDivergence::Kl.dual_domain(1.0, 10.0).unwrap();
        let gk = DualFunction::lower_constant(class.clone(), kdom);
        let zero = QFunction::zero(class, 10.0);
        let expected = (kdom.lo - 1.0f64).exp() - kdom.lo;
        assert_abs_diff_eq!(empirical_dual_loss(&gk, &zero, &d, PhiDivergence::Kl, 1.0).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn robq_loss_zero_at_targets_and_offset_squared() {
        let m = garnet(&GarnetParams { seed: 3, ..GarnetParams::new(3, 2) }).unwrap();
        let cfg = RpqConfig::tabular(PhiDivergence::Kl, 1.0, m.gamma, m.n_states, m.n_actions, m.fail_state);
        // one record per cell so the least-squares fit interpolates the targets
        let d = TransitionDataset::new(
            (0..m.n_states).flat_map(|s| (0..2).map(move |a| (s, a))).map(|(s, a)| record(s, a, m.reward(s, a), (s + a) % 4)).collect(),
        );
        let f = QFunction::from_qtable(&QTable::from_cells(4, 2, (0..8).map(|i| i as f64 * 0.5).collect()).unwrap(), cfg.v_max());
        let (g, q) = rpq_step(&f, &d, &cfg).unwrap();
        assert_abs_diff_eq!(empirical_robq_loss(&q, &f, &g, &d, cfg.divergence, 1.0, cfg.gamma).unwrap(), 0.0, epsilon = 1e-20);
        let shifted = QFunction::new(
            q.class.clone(),
            match &q.repr {
                crate::function_class::Representation::Table(t) => crate::function_class::Representation::Table(t.iter().map(|x| x + 0.25).collect()),
                _ => unreachable!(),
            },
            cfg.v_max(),
        )
        .unwrap();
        assert_abs_diff_eq!(
            empirical_robq_loss(&shifted, &f, &g, &d, cfg.divergence, 1.0, cfg.gamma).unwrap(),
            0.0625,
            epsilon = 1e-12
        );
    }

    #[test]
    fn exact_data_step_matches_oracle_operator() {
        let m = garnet(&GarnetParams { seed: 8, ..GarnetParams::new(4, 2) }).unwrap();
        let d = exact_dataset(&m);
        for div in [PhiDivergence::Tv, PhiDivergence::ChiSquare, PhiDivergence::Kl, PhiDivergence::Cvar { alpha: 0.5 }] {
            let cfg = RpqConfig::tabular(div, 1.0, m.gamma, m.n_states, m.n_actions, m.fail_state);
            let q0 = QTable::from_cells(5, 2, (0..10).map(|i| (i as f64 * 0.77) % 4.0).collect()).unwrap();
            let (_, q1) = rpq_step(&QFunction::from_qtable(&q0, cfg.v_max()), &d, &cfg).unwrap();
            let oracle = robust_bellman_apply(&m, div, 1.0, &q0).unwrap();
            assert!(q1.to_qtable().sup_distance(&oracle) <= 1e-6, "{div}");
        }
    }

    #[test]
    fn single_state_converges() {
        let m = single_state(1.0, 0.5).unwrap();
        let d = TransitionDataset::new(vec![record(0, 0, 1.0, 0); 3]);
        let mut cfg = RpqConfig::tabular(PhiDivergence::Kl, 1.0, 0.5, 1, 1, None);
        cfg.iterations = Some(60);
        let out = rpq_run(&cfg, &d).unwrap();
        assert_abs_diff_eq!(out.q.evaluate(0, 0, 0), 2.0, epsilon = 1e-9);
        assert_eq!(out.policy, Policy::StationaryDeterministic(vec![0]));
        assert_eq!(out.trace.rows.len(), 60);
        let _ = m;
    }

    #[test]
    fn tv_without_fail_state_rejected_and_reruns_identical() {
        let d = TransitionDataset::new(vec![record(0, 0, 1.0, 0)]);
        let cfg = RpqConfig::tabular(PhiDivergence::Tv, 1.0, 0.5, 1, 1, None);
        assert!(rpq_run(&cfg, &d).is_err());
        let m = garnet(&GarnetParams { seed: 1, ..GarnetParams::new(3, 2) }).unwrap();
        let data = crate::mdp::sample_offline_dataset(&m, &crate::mdp::StateActionDistribution::uniform(4, 2), 500, 2).unwrap();
        let cfg = RpqConfig::tabular(PhiDivergence::Tv, 1.0, m.gamma, 4, 2, m.fail_state);
        let a = rpq_run(&cfg, &data).unwrap();
        let b = rpq_run(&cfg, &data).unwrap();
        assert_eq!(a.trace.numeric(), b.trace.numeric());
        assert_eq!(a.q, b.q);
        // record order does not matter
        let mut rev = data.clone();
        rev.records.reverse();
        let c = rpq_run(&cfg, &rev).unwrap();
        assert!(c.q.to_qtable().sup_distance(&a.q.to_qtable()) <= 1e-12);
    }
}
