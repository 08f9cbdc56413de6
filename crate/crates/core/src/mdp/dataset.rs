use serde::{Deserialize, Serialize};

use crate::error::{Result, RrlError};
use crate::rng::{self, Rng};

use super::policy::sample_index;
use super::{FiniteHorizonMdp, Policy, TabularMdp};

/// Where a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Offline,
    /// Collected on-policy at iteration k.
    OnPolicy(usize),
}

fn default_weight() -> f64 {
    1.0
}

fn is_unit(w: &f64) -> bool {
    *w == 1.0
}

/// One transition (h, s, a, r, s′). `h` is 0 for discounted datasets.
/// `weight` is a sampling mass (1 for sampled data; exact-enumeration
/// datasets carry transition probabilities instead).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub sp: usize,
    pub prov: Provenance,
    #[serde(default = "default_weight", skip_serializing_if = "is_unit")]
    pub weight: f64,
}

/// An ordered list of transition records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub records: Vec<TransitionRecord>,
}

impl TransitionDataset {
    pub fn new(records: Vec<TransitionRecord>) -> Self {
        TransitionDataset { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TransitionRecord> {
        self.records.iter()
    }

    /// Records with step index `h`, in dataset order.
    pub fn at_step(&self, h: usize) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter().filter(move |r| r.h == h)
    }

    pub fn extend(&mut self, other: &TransitionDataset) {
        self.records.extend_from_slice(&other.records);
    }

    pub fn total_weight(&self) -> f64 {
        self.records.iter().map(|r| r.weight).sum()
    }

    /// Checks indices, weights and rewards against a model's dimensions.
    pub fn validate(&self, n_states: usize, n_actions: usize, horizon: usize) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.h >= horizon || r.s >= n_states || r.sp >= n_states || r.a >= n_actions {
                return Err(RrlError::InvalidParameter(format!("record {i} has out-of-range indices")));
            }
            if !(r.weight > 0.0 && r.weight.is_finite()) || !r.r.is_finite() {
                return Err(RrlError::InvalidParameter(format!("record {i} has invalid reward or weight")));
            }
        }
        Ok(())
    }

    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: TransitionRecord = serde_json::from_str(line)
                .map_err(|e| RrlError::InvalidParameter(format!("dataset line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(TransitionDataset { records })
    }
}

impl<'a> IntoIterator for &'a TransitionDataset {
    type Item = &'a TransitionRecord;
    type IntoIter = std::slice::Iter<'a, TransitionRecord>;
    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

/// A probability distribution μ over state-action cells (`s * n_actions + a`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateActionDistribution {
    pub n_states: usize,
    pub n_actions: usize,
    pub weights: Vec<f64>,
}

impl StateActionDistribution {
    pub fn new(n_states: usize, n_actions: usize, weights: Vec<f64>) -> Result<Self> {
        super::validate_distribution(&weights, n_states * n_actions, "behavior distribution")?;
        Ok(StateActionDistribution { n_states, n_actions, weights })
    }

    /// Normalizes nonnegative masses.
    pub fn from_masses(n_states: usize, n_actions: usize, masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(RrlError::InvalidParameter("behavior masses must have positive finite total".into()));
        }
        let mut weights: Vec<f64> = masses.iter().map(|m| m / total).collect();
        let residue = 1.0 - weights.iter().sum::<f64>();
        if let Some((i, _)) = weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        {
            weights[i] += residue;
        }
        StateActionDistribution::new(n_states, n_actions, weights)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let n = n_states * n_actions;
        StateActionDistribution::from_masses(n_states, n_actions, vec![1.0; n]).expect("uniform is valid")
    }

    /// Uniform over the given states (all actions), zero elsewhere.
    pub fn uniform_over_states(n_states: usize, n_actions: usize, states: &[usize]) -> Result<Self> {
        let mut masses = vec![0.0; n_states * n_actions];
        for &s in states {
            for a in 0..n_actions {
                masses[s * n_actions + a] = 1.0;
            }
        }
        StateActionDistribution::from_masses(n_states, n_actions, masses)
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.weights[s * self.n_actions + a]
    }

    fn sample(&self, rng: &mut Rng) -> (usize, usize) {
        let c = sample_index(&self.weights, rng);
        (c / self.n_actions, c % self.n_actions)
    }
}

fn check_behavior(mu: &StateActionDistribution, n_states: usize, n_actions: usize) -> Result<()> {
    if mu.n_states != n_states || mu.n_actions != n_actions {
        return Err(RrlError::ShapeMismatch(format!(
            "behavior distribution is {}x{}, model is {n_states}x{n_actions}",
            mu.n_states, mu.n_actions
        )));
    }
    Ok(())
}

/// n i.i.d. records (s, a) ~ μ, s′ ~ P⁰(·|s, a), all with h = 0.
pub fn sample_offline_dataset(
    mdp: &TabularMdp,
    mu: &StateActionDistribution,
    n: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if n == 0 {
        return Err(RrlError::InvalidParameter("dataset size must be positive".into()));
    }
    check_behavior(mu, mdp.n_states, mdp.n_actions)?;
    let mut rng = rng::stream(seed, rng::STREAM_OFFLINE_DATA);
    let records = (0..n)
        .map(|_| {
            let (s, a) = mu.sample(&mut rng);
            let sp = sample_index(mdp.row(s, a), &mut rng);
            TransitionRecord {
                h: 0,
                s,
                a,
                r: mdp.reward(s, a),
                sp,
                prov: Provenance::Offline,
                weight: 1.0,
            }
        })
        .collect();
    Ok(TransitionDataset { records })
}

/// n i.i.d. records per step h with (s, a) ~ μ_h and s′ ~ P⁰_h(·|s, a).
/// Records are ordered by h, then draw order.
pub fn sample_offline_dataset_fh(
    mdp: &FiniteHorizonMdp,
    mus: &[StateActionDistribution],
    n: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if n == 0 {
        return Err(RrlError::InvalidParameter("dataset size must be positive".into()));
    }
    if mus.len() != mdp.horizon {
        return Err(RrlError::ShapeMismatch(format!(
            "{} behavior distributions for horizon {}",
            mus.len(),
            mdp.horizon
        )));
    }
    let mut rng = rng::stream(seed, rng::STREAM_OFFLINE_DATA);
    let mut records = Vec::with_capacity(n * mdp.horizon);
    for (h, mu) in mus.iter().enumerate() {
        check_behavior(mu, mdp.n_states, mdp.n_actions)?;
        for _ in 0..n {
            let (s, a) = mu.sample(&mut rng);
            let sp = sample_index(mdp.row(h, s, a), &mut rng);
            records.push(TransitionRecord {
                h,
                s,
                a,
                r: mdp.reward(h, s, a),
                sp,
                prov: Provenance::Offline,
                weight: 1.0,
            });
        }
    }
    Ok(TransitionDataset { records })
}

/// Every (s, a, s′) with P⁰(s′|s, a) > 0, weighted by that probability, so
/// per-cell weighted means are exact expectations under P⁰.
pub fn exact_dataset(mdp: &TabularMdp) -> TransitionDataset {
    let mut records = Vec::new();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            for (sp, &p) in mdp.row(s, a).iter().enumerate() {
                if p > 0.0 {
                    records.push(TransitionRecord {
                        h: 0,
                        s,
                        a,
                        r: mdp.reward(s, a),
                        sp,
                        prov: Provenance::Offline,
                        weight: p,
                    });
                }
            }
        }
    }
    TransitionDataset { records }
}

/// Finite-horizon version of [`exact_dataset`].
pub fn exact_dataset_fh(mdp: &FiniteHorizonMdp) -> TransitionDataset {
    let mut records = Vec::new();
    for h in 0..mdp.horizon {
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                for (sp, &p) in mdp.row(h, s, a).iter().enumerate() {
                    if p > 0.0 {
                        records.push(TransitionRecord {
                            h,
                            s,
                            a,
                            r: mdp.reward(h, s, a),
                            sp,
                            prov: Provenance::Offline,
                            weight: p,
                        });
                    }
                }
            }
        }
    }
    TransitionDataset { records }
}

/// A sampling-only episodic environment: the learner sees states and
/// rewards, never the transition tables.
pub trait EpisodicEnv {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Starts an episode and returns s₀ ~ d0.
    fn reset(&mut self) -> usize;
    /// Takes action `a` at the current step; returns (r, s′).
    fn step(&mut self, a: usize) -> Result<(f64, usize)>;
    /// Current step index within the episode.
    fn current_step(&self) -> usize;
}

/// Seeded simulator of a finite-horizon nominal model.
pub struct Simulator<'a> {
    mdp: &'a FiniteHorizonMdp,
    rng: Rng,
    state: usize,
    h: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(mdp: &'a FiniteHorizonMdp, seed: u64) -> Self {
        Simulator {
            mdp,
            rng: rng::stream(seed, rng::STREAM_ONLINE_DATA),
            state: 0,
            h: mdp.horizon,
        }
    }
}

impl EpisodicEnv for Simulator<'_> {
    fn n_states(&self) -> usize {
        self.mdp.n_states
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions
    }

    fn horizon(&self) -> usize {
        self.mdp.horizon
    }

    fn reset(&mut self) -> usize {
        self.state = sample_index(&self.mdp.d0, &mut self.rng);
        self.h = 0;
        self.state
    }

    fn step(&mut self, a: usize) -> Result<(f64, usize)> {
        if self.h >= self.mdp.horizon {
            return Err(RrlError::InvalidParameter("step called after the episode ended".into()));
        }
        if a >= self.mdp.n_actions {
            return Err(RrlError::InvalidParameter(format!("action {a} out of range")));
        }
        let r = self.mdp.reward(self.h, self.state, a);
        let sp = sample_index(self.mdp.row(self.h, self.state, a), &mut self.rng);
        self.state = sp;
        self.h += 1;
        Ok((r, sp))
    }

    fn current_step(&self) -> usize {
        self.h
    }
}

/// Rolls `m` full episodes of `policy` and records every step, tagged as
/// on-policy data of iteration `k`. Records are ordered by (h, episode).
pub fn collect_episodes(
    env: &mut dyn EpisodicEnv,
    policy: &Policy,
    m: usize,
    k: usize,
    action_rng: &mut Rng,
) -> Result<TransitionDataset> {
    let horizon = env.horizon();
    let mut by_step: Vec<Vec<TransitionRecord>> = vec![Vec::with_capacity(m); horizon];
    for _ in 0..m {
        let member = policy.episode_member(action_rng);
        let mut s = env.reset();
        for (h, step_records) in by_step.iter_mut().enumerate() {
            let a = member.sample_action(h, s, action_rng);
            let (r, sp) = env.step(a)?;
            step_records.push(TransitionRecord {
                h,
                s,
                a,
                r,
                sp,
                prov: Provenance::OnPolicy(k),
                weight: 1.0,
            });
            s = sp;
        }
    }
    Ok(TransitionDataset {
        records: by_step.into_iter().flatten().collect(),
    })
}

/// `m` on-policy episodes on a fresh seeded simulator (m records per h).
pub fn rollout_onpolicy(mdp: &FiniteHorizonMdp, policy: &Policy, m: usize, seed: u64) -> Result<TransitionDataset> {
    policy.validate(mdp.n_states, mdp.n_actions, Some(mdp.horizon))?;
    let mut env = Simulator::new(mdp, seed);
    let mut action_rng = rng::stream(seed, rng::STREAM_POLICIES);
    collect_episodes(&mut env, policy, m, 0, &mut action_rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> TabularMdp {
        TabularMdp::new(
            2,
            2,
            vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.0, 1.0], vec![0.0, 1.0]],
            vec![1.0, 0.5, 0.0, 0.0],
            0.9,
            vec![1.0, 0.0],
            Some(1),
        )
        .unwrap()
    }

    #[test]
    fn offline_sampling_is_deterministic() {
        let m = two_state();
        let mu = StateActionDistribution::uniform(2, 2);
        let a = sample_offline_dataset(&m, &mu, 4, 7).unwrap();
        let b = sample_offline_dataset(&m, &mu, 4, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(sample_offline_dataset(&m, &mu, 0, 7).is_err());
    }

    #[test]
    fn zero_mass_cells_never_sampled() {
        let m = two_state();
        let mu = StateActionDistribution::from_masses(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let d = sample_offline_dataset(&m, &mu, 2000, 3).unwrap();
        assert!(d.iter().all(|r| !(r.s == 0 && r.a == 1)));
    }

    #[test]
    fn empirical_law_matches_nominal() {
        let m = two_state();
        let mu = StateActionDistribution::from_masses(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let d = sample_offline_dataset(&m, &mu, 100_000, 11).unwrap();
        let to_one = d.iter().filter(|r| r.sp == 1).count() as f64 / d.len() as f64;
        assert!((to_one - 0.3).abs() < 1e-2, "{to_one}");
        assert!(d.iter().all(|r| r.r == 1.0));
    }

    #[test]
    fn jsonl_round_trip() {
        let m = two_state();
        let mut d = sample_offline_dataset(&m, &StateActionDistribution::uniform(2, 2), 5, 1).unwrap();
        d.records[0].prov = Provenance::OnPolicy(3);
        d.records[1].weight = 0.25;
        let text = d.to_jsonl();
        assert!(text.lines().next().unwrap().contains("\"onpolicy\":3"));
        assert!(text.lines().nth(2).unwrap().contains("\"prov\":\"offline\""));
        assert!(!text.lines().nth(2).unwrap().contains("weight"));
        assert_eq!(TransitionDataset::from_jsonl(&text).unwrap(), d);
        assert!(TransitionDataset::from_jsonl("{\"h\":0}").is_err());
    }

    #[test]
    fn exact_dataset_weights_are_probabilities() {
        let d = exact_dataset(&two_state());
        assert_eq!(d.len(), 6);
        let cell0: f64 = d.iter().filter(|r| r.s == 0 && r.a == 0).map(|r| r.weight).sum();
        assert!((cell0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rollouts_follow_deterministic_chain() {
        // 3-state deterministic chain 0 -> 1 -> 2 (2 absorbing fail state)
        let chain = TabularMdp::new(
            3,
            1,
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
            vec![1.0, 0.5, 0.0],
            0.9,
            vec![1.0, 0.0, 0.0],
            Some(2),
        )
        .unwrap()
        .to_finite_horizon(3);
        let pi = Policy::NonstationaryDeterministic(vec![vec![0; 3]; 3]);
        let d = rollout_onpolicy(&chain, &pi, 1, 5).unwrap();
        let steps: Vec<(usize, usize, f64, usize)> = d.iter().map(|r| (r.h, r.s, r.r, r.sp)).collect();
        assert_eq!(steps, vec![(0, 0, 1.0, 1), (1, 1, 0.5, 2), (2, 2, 0.0, 2)]);
        assert!(d.iter().all(|r| r.prov == Provenance::OnPolicy(0)));
        let many = rollout_onpolicy(&chain, &pi, 4, 5).unwrap();
        for h in 0..3 {
            assert_eq!(many.at_step(h).count(), 4);
        }
        assert_eq!(rollout_onpolicy(&chain, &pi, 4, 5).unwrap(), many);
    }

    #[test]
    fn fail_state_absorbs_trajectories() {
        let fh = two_state().to_finite_horizon(6);
        let pi = Policy::NonstationaryStochastic(vec![vec![vec![0.5, 0.5]; 2]; 6]);
        let d = rollout_onpolicy(&fh, &pi, 200, 9).unwrap();
        for r in d.iter().filter(|r| r.s == 1) {
            assert_eq!(r.sp, 1);
            assert_eq!(r.r, 0.0);
        }
    }
}
