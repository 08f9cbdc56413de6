//! Hybrid robust TV-regularized Q-iteration over a finite horizon.
//!
//! Iteration k extracts the greedy policy π_k of Q^k, rolls it out m_on
//! times on the environment, appends those on-policy records to the
//! aggregate dataset, and refits Q^{k+1} by backward induction h = H−1 … 0
//! with the shifted TV losses (g − v)₊ − g over g ∈ [0, λ].

use serde::{Deserialize, Serialize};

use crate::divergence::{DualDomain, PhiDivergence};
use crate::error::{Result, RrlError};
use crate::function_class::{
    erm_dual_fit, least_squares_fit, DualFunction, DualLoss, ErmOptions, FunctionClass, Input, QFunction, Ridge,
};
use crate::mdp::{collect_episodes, EpisodicEnv, FiniteHorizonMdp, Policy, Provenance, Simulator, TransitionDataset, TransitionRecord};
use crate::oracle::{robust_policy_value_fh, RobustSolution};
use crate::rng;

/// Configuration of one HyTQ run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HytqConfig {
    pub lambda: f64,
    /// K
    pub iterations: usize,
    /// Offline records per step; `None` means K.
    pub m_off: Option<usize>,
    /// On-policy episodes per iteration.
    #[serde(default = "default_m_on")]
    pub m_on: usize,
    /// Classes over (h, s, a) with n_steps = H.
    pub f_class: FunctionClass,
    pub g_class: FunctionClass,
    #[serde(default)]
    pub ridge: Ridge,
    #[serde(default)]
    pub erm: ErmOptions,
    pub seed: u64,
}

fn default_m_on() -> usize {
    1
}

impl HytqConfig {
    pub fn tabular(lambda: f64, iterations: usize, horizon: usize, n_states: usize, n_actions: usize, seed: u64) -> Self {
        HytqConfig {
            lambda,
            iterations,
            m_off: None,
            m_on: 1,
            f_class: FunctionClass::tabular(horizon, n_states, n_actions),
            g_class: FunctionClass::tabular(horizon, n_states, n_actions),
            ridge: Ridge::Auto,
            erm: ErmOptions::default(),
            seed,
        }
    }

    pub fn m_off(&self) -> usize {
        self.m_off.unwrap_or(self.iterations)
    }

    pub fn horizon(&self) -> usize {
        self.f_class.shape().0
    }

    fn loss(&self) -> DualLoss {
        DualLoss::ShiftedTv { lambda: self.lambda }
    }

    fn g_domain(&self) -> Result<DualDomain> {
        DualDomain::new(0.0, self.lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(RrlError::InvalidParameter(format!("lambda = {}", self.lambda)));
        }
        if self.iterations == 0 {
            return Err(RrlError::InvalidParameter("K must be at least 1".into()));
        }
        if self.m_on == 0 {
            return Err(RrlError::InvalidParameter("m_on must be at least 1".into()));
        }
        if self.f_class.shape() != self.g_class.shape() {
            return Err(RrlError::ShapeMismatch("F and G must share their (h, s, a) domain".into()));
        }
        Ok(())
    }
}

/// Q^k as one fitted function per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseQ {
    pub steps: Vec<QFunction>,
}

impl StepwiseQ {
    pub fn zero(class: &FunctionClass, v_max: f64) -> Self {
        StepwiseQ {
            steps: (0..class.shape().0).map(|_| QFunction::zero(class.clone(), v_max)).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn evaluate(&self, h: usize, s: usize, a: usize) -> f64 {
        self.steps[h].evaluate(h, s, a)
    }

    /// max_a Q_h(s, a), with Q_H ≡ 0.
    pub fn state_value(&self, h: usize, s: usize) -> f64 {
        if h >= self.steps.len() {
            0.0
        } else {
            self.steps[h].state_value(h, s)
        }
    }

    /// Non-stationary greedy policy with lowest-index ties.
    pub fn greedy_policy(&self) -> Policy {
        let (_, ns, _) = self.steps[0].class.shape();
        Policy::NonstationaryDeterministic(
            (0..self.horizon())
                .map(|h| (0..ns).map(|s| self.steps[h].greedy_action(h, s)).collect())
                .collect(),
        )
    }
}

/// Aggregate-dataset composition at one (k, h).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub offline: usize,
    pub online: usize,
    /// Distinct on-policy iteration tags present.
    pub online_iterations: usize,
    /// Largest on-policy iteration tag present.
    pub latest_online_iteration: Option<usize>,
}

/// Everything recorded for iteration k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HytqIterationRecord {
    pub k: usize,
    /// π_k, greedy on Q^k.
    pub policy: Policy,
    /// Q^{k+1}
    pub q: StepwiseQ,
    /// g^{k+1}_h for h = 0..H
    pub g: Vec<DualFunction>,
    /// Per-step dataset composition used for the fits.
    pub ledger: Vec<LedgerEntry>,
    /// Robust value of π_k, filled by [`score_records`].
    pub robust_value: Option<f64>,
}

/// A finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HytqRun {
    pub records: Vec<HytqIterationRecord>,
    /// On-policy shards, one per iteration.
    pub shards: Vec<TransitionDataset>,
}

impl HytqRun {
    pub fn policies(&self) -> Vec<Policy> {
        self.records.iter().map(|r| r.policy.clone()).collect()
    }
}

/// Mean over records of (g(s,a) − max_a′ f_{h+1}(s′,a′))₊ − g(s,a).
pub fn tv_empirical_dual_loss(g: &DualFunction, f: &StepwiseQ, records: &[TransitionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(RrlError::Empty("dataset".into()));
    }
    let mut total = 0.0;
    let mut mass = 0.0;
    for r in records {
        let v = f.state_value(r.h + 1, r.sp);
        let gv = g.evaluate(r.h, r.s, r.a);
        total += r.weight * ((gv - v).max(0.0) - gv);
        mass += r.weight;
    }
    Ok(total / mass)
}

/// Mean over records of (r_h − (g − max f_{h+1})₊ + g − Q_h(s,a))².
pub fn tv_empirical_robq_loss(
    q: &QFunction,
    f: &StepwiseQ,
    g: &DualFunction,
    records: &[TransitionRecord],
) -> Result<f64> {
    if records.is_empty() {
        return Err(RrlError::Empty("dataset".into()));
    }
    let mut total = 0.0;
    let mut mass = 0.0;
    for r in records {
        let v = f.state_value(r.h + 1, r.sp);
        let gv = g.evaluate(r.h, r.s, r.a);
        let target = r.r - (gv - v).max(0.0) + gv;
        total += r.weight * (target - q.evaluate(r.h, r.s, r.a)).powi(2);
        mass += r.weight;
    }
    Ok(total / mass)
}

/// One backward step at level h: fit g_h against V_{h+1} = max_a Q_{h+1},
/// then Q_h on the targets r − (g − V_{h+1}(s′))₊ + g.
pub fn hytq_backward_step(
    config: &HytqConfig,
    next: &StepwiseQ,
    h: usize,
    records: &[TransitionRecord],
) -> Result<(DualFunction, QFunction)> {
    if records.is_empty() {
        return Err(RrlError::Empty(format!("no records at step {h}")));
    }
    if let Some(r) = records.iter().find(|r| r.h != h) {
        return Err(RrlError::InvalidParameter(format!("record at step {} passed to step {h}", r.h)));
    }
    let inputs: Vec<Input> = records.iter().map(|r| (h, r.s, r.a)).collect();
    let weights: Vec<f64> = records.iter().map(|r| r.weight).collect();
    let next_values: Vec<f64> = records.iter().map(|r| next.state_value(h + 1, r.sp)).collect();
    let loss = config.loss();
    let g = erm_dual_fit(&config.g_class, &inputs, &next_values, Some(&weights), &loss, config.g_domain()?, &config.erm)?;
    let targets: Vec<f64> = records
        .iter()
        .zip(&next_values)
        .map(|(r, &v)| {
            let gv = g.evaluate(h, r.s, r.a);
            r.r - (gv - v).max(0.0) + gv
        })
        .collect();
    let v_max = config.horizon() as f64;
    let q = least_squares_fit(&config.f_class, &inputs, &targets, Some(&weights), config.ridge, v_max)?;
    Ok((g, q))
}

fn ledger_entry(records: &[TransitionRecord]) -> LedgerEntry {
    let mut offline = 0;
    let mut online = 0;
    let mut tags = std::collections::BTreeSet::new();
    for r in records {
        match r.prov {
            Provenance::Offline => offline += 1,
            Provenance::OnPolicy(k) => {
                online += 1;
                tags.insert(k);
            }
        }
    }
    LedgerEntry {
        offline,
        online,
        online_iterations: tags.len(),
        latest_online_iteration: tags.iter().next_back().copied(),
    }
}

/// Runs K iterations against a sampling-only environment and an offline
/// dataset with m_off records per step.
pub fn hytq_run(env: &mut dyn EpisodicEnv, offline: &TransitionDataset, config: &HytqConfig) -> Result<HytqRun> {
    config.validate()?;
    let horizon = config.horizon();
    let (_, ns, na) = config.f_class.shape();
    if env.horizon() != horizon || env.n_states() != ns || env.n_actions() != na {
        return Err(RrlError::ShapeMismatch("environment and function classes disagree".into()));
    }
    offline.validate(ns, na, horizon)?;
    let m_off = config.m_off();
    let mut aggregate: Vec<Vec<TransitionRecord>> = vec![Vec::new(); horizon];
    for r in offline {
        if r.prov != Provenance::Offline {
            return Err(RrlError::InvalidParameter("offline dataset contains on-policy records".into()));
        }
        aggregate[r.h].push(*r);
    }
    if let Some((h, recs)) = aggregate.iter().enumerate().find(|(_, recs)| recs.len() != m_off) {
        return Err(RrlError::InvalidParameter(format!(
            "offline dataset has {} records at step {h}, expected m_off = {m_off}",
            recs.len()
        )));
    }

    let v_max = horizon as f64;
    let mut q = StepwiseQ::zero(&config.f_class, v_max);
    let mut action_rng = rng::stream(config.seed, rng::STREAM_POLICIES);
    let mut records = Vec::with_capacity(config.iterations);
    let mut shards = Vec::with_capacity(config.iterations);
    for k in 0..config.iterations {
        let policy = q.greedy_policy();
        let shard = collect_episodes(env, &policy, config.m_on, k, &mut action_rng)
            .map_err(|e| e.context(format!("iteration {k}, rollout")))?;
        for r in &shard {
            aggregate[r.h].push(*r);
        }
        shards.push(shard);

        let mut next = StepwiseQ::zero(&config.f_class, v_max);
        let mut gs: Vec<Option<DualFunction>> = vec![None; horizon];
        let mut ledger = vec![ledger_entry(&[]); horizon];
        for h in (0..horizon).rev() {
            let (g, qh) = hytq_backward_step(config, &next, h, &aggregate[h])
                .map_err(|e| e.context(format!("iteration {k}, step {h}")))?;
            next.steps[h] = qh;
            gs[h] = Some(g);
            ledger[h] = ledger_entry(&aggregate[h]);
        }
        q = next;
        records.push(HytqIterationRecord {
            k,
            policy,
            q: q.clone(),
            g: gs.into_iter().map(|g| g.expect("every step fitted")).collect(),
            ledger,
            robust_value: None,
        });
    }
    Ok(HytqRun { records, shards })
}

/// Runs HyTQ on a simulator of `mdp`, which must declare a fail state at
/// every step. The learner only sees sampled transitions.
pub fn hytq_run_on_model(mdp: &FiniteHorizonMdp, offline: &TransitionDataset, config: &HytqConfig) -> Result<HytqRun> {
    if !mdp.has_fail_states() {
        return Err(RrlError::FailState {
            state: usize::MAX,
            reason: "HyTQ requires a fail state at every step".into(),
        });
    }
    let mut env = Simulator::new(mdp, config.seed);
    hytq_run(&mut env, offline, config)
}

/// Checks that every (k, h) aggregate holds m_off offline records plus
/// (k+1)·m_on on-policy records tagged 0..=k.
pub fn check_ledger(run: &HytqRun, m_off: usize, m_on: usize) -> Result<()> {
    for rec in &run.records {
        for (h, e) in rec.ledger.iter().enumerate() {
            let ok = e.offline == m_off
                && e.online == (rec.k + 1) * m_on
                && e.online_iterations == rec.k + 1
                && e.latest_online_iteration == Some(rec.k);
            if !ok {
                return Err(RrlError::InvalidParameter(format!(
                    "ledger mismatch at k = {}, h = {h}: {e:?}",
                    rec.k
                )));
            }
        }
    }
    Ok(())
}

/// Uniform mixture of the given policies (a singleton is returned as is).
pub fn uniform_mixture_policy(policies: &[Policy]) -> Result<Policy> {
    match policies {
        [] => Err(RrlError::Empty("policy list".into())),
        [single] => Ok(single.clone()),
        many => Ok(Policy::Mixture {
            members: many.to_vec(),
            weights: vec![1.0 / many.len() as f64; many.len()],
        }),
    }
}

/// Fills `robust_value` of every record with the exact robust value of π_k.
pub fn score_records(run: &mut HytqRun, mdp: &FiniteHorizonMdp, lambda: f64) -> Result<()> {
    let mut cache: Vec<(Policy, f64)> = Vec::new();
    for rec in &mut run.records {
        let value = match cache.iter().find(|(p, _)| *p == rec.policy) {
            Some((_, v)) => *v,
            None => {
                let v = robust_policy_value_fh(mdp, &rec.policy, PhiDivergence::Tv, lambda)?;
                cache.push((rec.policy.clone(), v));
                v
            }
        };
        rec.robust_value = Some(value);
    }
    Ok(())
}

/// Per-iteration and cumulative suboptimality V^{π*} − V^{π_k} under d0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalityTrace {
    pub per_iteration: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl SuboptimalityTrace {
    /// CSV with header `k,per_iter_subopt,cumulative`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,per_iter_subopt,cumulative\n");
        for (k, (p, c)) in self.per_iteration.iter().zip(&self.cumulative).enumerate() {
            out.push_str(&format!("{k},{p},{c}\n"));
        }
        out
    }
}

/// Suboptimality of each scored record against the oracle solution.
pub fn cumulative_suboptimality(
    records: &[HytqIterationRecord],
    oracle: &RobustSolution,
    d0: &[f64],
) -> Result<SuboptimalityTrace> {
    if oracle.q_star.n_states != d0.len() {
        return Err(RrlError::ShapeMismatch("oracle and d0 disagree".into()));
    }
    let v_star = oracle.value(d0);
    let mut per_iteration = Vec::with_capacity(records.len());
    let mut cumulative = Vec::with_capacity(records.len());
    let mut acc = 0.0;
    for rec in records {
        let v = rec
            .robust_value
            .ok_or_else(|| RrlError::InvalidParameter(format!("record {} is not scored", rec.k)))?;
        let gap = v_star - v;
        acc += gap;
        per_iteration.push(gap);
        cumulative.push(acc);
    }
    Ok(SuboptimalityTrace { per_iteration, cumulative })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::generators::{deterministic_chain_fh, fh_garnet, GarnetParams};
    use crate::mdp::{sample_offline_dataset_fh, StateActionDistribution};
    use crate::oracle::robust_dp_finite_horizon;
    use approx::assert_abs_diff_eq;

    fn offline(mdp: &FiniteHorizonMdp, m: usize, seed: u64) -> TransitionDataset {
        let mus = vec![StateActionDistribution::uniform(mdp.n_states, mdp.n_actions); mdp.horizon];
        sample_offline_dataset_fh(mdp, &mus, m, seed).unwrap()
    }

    #[test]
    fn tv_loss_examples_and_shift_identity() {
        use crate::function_class::Representation::Table;
        let class = FunctionClass::tabular(2, 2, 1);
        let domain = DualDomain::new(0.0, 1.0).unwrap();
        let g = DualFunction::new(class.clone(), Table(vec![0.5; 4]), domain).unwrap();
        // Q_1(1, 0) = 1, everything else 0
        let f = StepwiseQ {
            steps: vec![
                QFunction::zero(class.clone(), 3.0),
                QFunction::new(class.clone(), Table(vec![0.0, 0.0, 0.0, 1.0]), 3.0).unwrap(),
            ],
        };
        let rec = |h, sp| TransitionRecord { h, s: 0, a: 0, r: 0.0, sp, prov: Provenance::Offline, weight: 1.0 };
        assert_abs_diff_eq!(tv_empirical_dual_loss(&g, &f, &[rec(0, 1)]).unwrap(), -0.5, epsilon = 1e-15);
        let g0 = DualFunction::new(class.clone(), Table(vec![0.0; 4]), domain).unwrap();
        assert_eq!(tv_empirical_dual_loss(&g0, &f, &[rec(0, 1), rec(1, 0)]).unwrap(), 0.0);
        // robq loss: target r − (g − v)₊ + g = 0.5 at the first record
        let q = QFunction::new(class.clone(), Table(vec![0.5, 0.0, 0.0, 0.0]), 3.0).unwrap();
        assert_abs_diff_eq!(tv_empirical_robq_loss(&q, &f, &g, &[rec(0, 1)]).unwrap(), 0.0, epsilon = 1e-15);
        let q2 = QFunction::new(class, Table(vec![0.75, 0.0, 0.0, 0.0]), 3.0).unwrap();
        assert_abs_diff_eq!(tv_empirical_robq_loss(&q2, &f, &g, &[rec(0, 1)]).unwrap(), 0.0625, epsilon = 1e-15);
        // the shifted loss at g is the Θ-coordinate TV loss at g − λ/2
        let shifted = DualLoss::ShiftedTv { lambda: 1.0 };
        let theta = DualLoss::Phi { div: PhiDivergence::Tv, lambda: 1.0 };
        for (eta, v) in [(0.0, 0.3), (0.4, 0.1), (1.0, 2.0), (0.7, 0.7)] {
            let a = shifted.value(eta, v).unwrap();
            let b = theta.value(eta - 0.5, v).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn ledger_and_determinism() {
        let mdp = fh_garnet(&GarnetParams { seed: 2, ..GarnetParams::new(3, 2) }, 3).unwrap();
        let k = 12;
        let cfg = HytqConfig::tabular(1.0, k, 3, mdp.n_states, 2, 5);
        let data = offline(&mdp, k, 1);
        let run = hytq_run_on_model(&mdp, &data, &cfg).unwrap();
        check_ledger(&run, k, 1).unwrap();
        assert_eq!(run.records.len(), k);
        assert_eq!(run.records[0].policy, Policy::NonstationaryDeterministic(vec![vec![0; 4]; 3]));
        let again = hytq_run_on_model(&mdp, &data, &cfg).unwrap();
        assert_eq!(run, again);
        assert!(hytq_run_on_model(&mdp, &offline(&mdp, k + 1, 1), &cfg).is_err());
    }

    #[test]
    fn horizon_one_fits_rewards() {
        let mdp = fh_garnet(&GarnetParams { seed: 3, branching: 2, ..GarnetParams::new(2, 2) }, 1).unwrap();
        let cfg = HytqConfig::tabular(1.0, 4, 1, mdp.n_states, 2, 0);
        let run = hytq_run_on_model(&mdp, &offline(&mdp, 4, 0), &cfg).unwrap();
        for rec in &run.records {
            for r in run.shards.iter().flat_map(|s| s.iter()) {
                assert_abs_diff_eq!(rec.q.evaluate(0, r.s, r.a), mdp.reward(0, r.s, r.a), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn chain_learns_oracle_policy() {
        let mdp = deterministic_chain_fh(4, 3, 0.2).unwrap();
        let oracle = robust_dp_finite_horizon(&mdp, PhiDivergence::Tv, 1.0).unwrap();
        let cfg = HytqConfig { m_off: Some(64), ..HytqConfig::tabular(1.0, 3, 3, 4, 2, 1) };
        let run = hytq_run_on_model(&mdp, &offline(&mdp, 64, 3), &cfg).unwrap();
        // after one fit the greedy policy is oracle-optimal in value
        let v1 = robust_policy_value_fh(&mdp, &run.records[1].policy, PhiDivergence::Tv, 1.0).unwrap();
        assert_abs_diff_eq!(v1, oracle.value(&mdp.d0), epsilon = 1e-12);
    }

    #[test]
    fn backward_step_is_pure() {
        let mdp = fh_garnet(&GarnetParams { seed: 6, ..GarnetParams::new(3, 2) }, 2).unwrap();
        let cfg = HytqConfig::tabular(1.0, 5, 2, mdp.n_states, 2, 9);
        let data = offline(&mdp, 5, 4);
        let run = hytq_run_on_model(&mdp, &data, &cfg).unwrap();
        let last = run.records.last().unwrap();
        let mut agg: Vec<TransitionRecord> = data.at_step(0).copied().collect();
        for shard in &run.shards {
            agg.extend(shard.at_step(0).copied());
        }
        let (g, q) = hytq_backward_step(&cfg, &last.q, 0, &agg).unwrap();
        assert_eq!(q, last.q.steps[0]);
        assert_eq!(g, last.g[0]);
    }

    #[test]
    fn mixture_and_suboptimality() {
        let mdp = fh_garnet(&GarnetParams { seed: 1, ..GarnetParams::new(3, 2) }, 3).unwrap();
        let oracle = robust_dp_finite_horizon(&mdp, PhiDivergence::Tv, 1.0).unwrap();
        let cfg = HytqConfig::tabular(1.0, 6, 3, mdp.n_states, 2, 2);
        let mut run = hytq_run_on_model(&mdp, &offline(&mdp, 6, 2), &cfg).unwrap();
        for rec in &mut run.records {
            rec.policy = oracle.greedy.clone();
        }
        score_records(&mut run, &mdp, 1.0).unwrap();
        let trace = cumulative_suboptimality(&run.records, &oracle, &mdp.d0).unwrap();
        assert!(trace.per_iteration.iter().all(|g| g.abs() <= 1e-12));
        let single = uniform_mixture_policy(std::slice::from_ref(&oracle.greedy)).unwrap();
        assert_eq!(single, oracle.greedy);
        assert!(uniform_mixture_policy(&[]).is_err());
    }
}
