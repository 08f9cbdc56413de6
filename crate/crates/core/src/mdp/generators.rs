//! Seeded random and hand-built instances.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RrlError};
use crate::rng::{self, Rng};

use super::{FiniteHorizonMdp, TabularMdp};

/// Random "Garnet" instance: each cell moves to `branching` random regular
/// successors with Dirichlet(1) probabilities; with a fail state, an extra
/// `fail_prob` of mass per cell goes to an appended absorbing zero-reward state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GarnetParams {
    /// Regular (non-fail) states.
    pub n_states: usize,
    pub n_actions: usize,
    #[serde(default = "default_branching")]
    pub branching: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_true")]
    pub fail_state: bool,
    #[serde(default = "default_fail_prob")]
    pub fail_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_branching() -> usize {
    3
}
fn default_gamma() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_fail_prob() -> f64 {
    0.1
}

impl GarnetParams {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        GarnetParams {
            n_states,
            n_actions,
            branching: default_branching(),
            gamma: default_gamma(),
            fail_state: true,
            fail_prob: default_fail_prob(),
            seed: 0,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(RrlError::InvalidParameter("garnet needs at least one state and action".into()));
        }
        if self.branching == 0 || self.branching > self.n_states {
            return Err(RrlError::InvalidParameter(format!(
                "branching {} must be in 1..={}",
                self.branching, self.n_states
            )));
        }
        if !(0.0..1.0).contains(&self.fail_prob) {
            return Err(RrlError::InvalidParameter(format!("fail_prob = {}", self.fail_prob)));
        }
        Ok(())
    }

    fn total_states(&self) -> usize {
        self.n_states + usize::from(self.fail_state)
    }

    /// One step's (transitions, rewards) over the total state space.
    fn step_tables(&self, rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
        let total = self.total_states();
        let fail = self.fail_state.then_some(self.n_states);
        let mut transitions = Vec::with_capacity(total * self.n_actions);
        let mut rewards = Vec::with_capacity(total * self.n_actions);
        for s in 0..total {
            for _ in 0..self.n_actions {
                let mut row = vec![0.0; total];
                if Some(s) == fail {
                    row[s] = 1.0;
                    rewards.push(0.0);
                } else {
                    let succ = sample_indices(rng, self.n_states, self.branching).into_vec();
                    let raw: Vec<f64> = succ.iter().map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
                    let regular_mass = if fail.is_some() { 1.0 - self.fail_prob } else { 1.0 };
                    let total_raw: f64 = raw.iter().sum();
                    for (&j, x) in succ.iter().zip(&raw) {
                        row[j] = regular_mass * x / total_raw;
                    }
                    if let Some(f) = fail {
                        row[f] = self.fail_prob;
                    }
                    fix_row_sum(&mut row);
                    rewards.push(rng.gen::<f64>());
                }
                transitions.push(row);
            }
        }
        (transitions, rewards)
    }

    fn d0(&self) -> Vec<f64> {
        let mut d0 = vec![1.0 / self.n_states as f64; self.n_states];
        if self.fail_state {
            d0.push(0.0);
        }
        fix_row_sum(&mut d0);
        d0
    }
}

/// Moves the floating-point residue of a probability row onto its largest entry.
fn fix_row_sum(row: &mut [f64]) {
    let residue = 1.0 - row.iter().sum::<f64>();
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    row[best] += residue;
}

/// Discounted Garnet instance.
pub fn garnet(params: &GarnetParams) -> Result<TabularMdp> {
    params.check()?;
    let mut rng = rng::stream(params.seed, rng::STREAM_INSTANCE);
    let (transitions, rewards) = params.step_tables(&mut rng);
    TabularMdp::new(
        params.total_states(),
        params.n_actions,
        transitions,
        rewards,
        params.gamma,
        params.d0(),
        params.fail_state.then_some(params.n_states),
    )
}

/// Finite-horizon Garnet instance with independent tables per step
/// (`gamma` is ignored).
pub fn fh_garnet(params: &GarnetParams, horizon: usize) -> Result<FiniteHorizonMdp> {
    params.check()?;
    if horizon == 0 {
        return Err(RrlError::InvalidParameter("horizon must be at least 1".into()));
    }
    let mut rng = rng::stream(params.seed, rng::STREAM_INSTANCE);
    let (transitions, rewards): (Vec<_>, Vec<_>) = (0..horizon).map(|_| params.step_tables(&mut rng)).unzip();
    let mdp = FiniteHorizonMdp {
        n_states: params.total_states(),
        n_actions: params.n_actions,
        horizon,
        transitions,
        rewards,
        d0: params.d0(),
        fail_states: vec![params.fail_state.then_some(params.n_states); horizon],
    };
    mdp.validate()?;
    Ok(mdp)
}

/// One state, one action, reward `r`, self-loop.
pub fn single_state(r: f64, gamma: f64) -> Result<TabularMdp> {
    TabularMdp::new(1, 1, vec![vec![1.0]], vec![r], gamma, vec![1.0], None)
}

/// Two states: state 0 has a risky high-reward action (r = 1, exits to the
/// fail state with probability 0.3) and a safe action (r = 0.6, exits with
/// probability 0.1); state 1 is the absorbing fail state.
pub fn loop_exit(gamma: f64) -> Result<TabularMdp> {
    TabularMdp::new(
        2,
        2,
        vec![vec![0.7, 0.3], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.0, 1.0]],
        vec![1.0, 0.6, 0.0, 0.0],
        gamma,
        vec![1.0, 0.0],
        Some(1),
    )
}

/// A finite-horizon chain with deterministic moves over regular states
/// 0..n−2 and an absorbing fail state n − 1: action 0 stays (reward
/// `stay_reward`); action 1 advances to the next state with reward 0, except
/// from the last regular state, where it cashes out (reward 1) into the fail
/// state.
pub fn deterministic_chain_fh(n: usize, horizon: usize, stay_reward: f64) -> Result<FiniteHorizonMdp> {
    if n < 2 {
        return Err(RrlError::InvalidParameter("chain needs at least 2 states".into()));
    }
    let fail = n - 1;
    let mut transitions = Vec::with_capacity(2 * n);
    let mut rewards = Vec::with_capacity(2 * n);
    for s in 0..n {
        for a in 0..2 {
            let mut row = vec![0.0; n];
            if s == fail {
                row[fail] = 1.0;
                rewards.push(0.0);
            } else if a == 0 {
                row[s] = 1.0;
                rewards.push(stay_reward);
            } else {
                row[s + 1] = 1.0;
                rewards.push(if s + 1 == fail { 1.0 } else { 0.0 });
            }
            transitions.push(row);
        }
    }
    let mut d0 = vec![0.0; n];
    d0[0] = 1.0;
    let mdp = FiniteHorizonMdp {
        n_states: n,
        n_actions: 2,
        horizon,
        transitions: vec![transitions; horizon],
        rewards: vec![rewards; horizon],
        d0,
        fail_states: vec![Some(fail); horizon],
    };
    mdp.validate()?;
    Ok(mdp)
}

/// Parses builtin names `garnet-N-A` (discounted) or `fh-garnet-N-A-H`.
pub fn parse_builtin_name(name: &str) -> Option<(bool, usize, usize, Option<usize>)> {
    let parts: Vec<&str> = name.split('-').collect();
    match parts.as_slice() {
        ["garnet", n, a] => Some((false, n.parse().ok()?, a.parse().ok()?, None)),
        ["fh", "garnet", n, a, h] => Some((true, n.parse().ok()?, a.parse().ok()?, Some(h.parse().ok()?))),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn garnet_is_valid_and_reproducible() {
        let p = GarnetParams { seed: 3, ..GarnetParams::new(5, 2) };
        let a = garnet(&p).unwrap();
        let b = garnet(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_states, 6);
        assert_eq!(a.fail_state, Some(5));
        assert!(a.validate().unwrap().max_support <= 4);
        let c = garnet(&GarnetParams { seed: 4, ..p.clone() }).unwrap();
        assert_ne!(a, c);
        let no_fail = garnet(&GarnetParams { fail_state: false, ..p }).unwrap();
        assert_eq!(no_fail.n_states, 5);
    }

    #[test]
    fn fh_garnet_and_chain_validate() {
        let p = GarnetParams { n_states: 3, ..GarnetParams::new(3, 2) };
        let fh = fh_garnet(&p, 3).unwrap();
        assert_eq!(fh.n_states, 4);
        assert!(fh.has_fail_states());
        assert_ne!(fh.transitions[0], fh.transitions[1]);
        assert!(deterministic_chain_fh(4, 3, 0.1).is_ok());
        assert!(loop_exit(0.9).is_ok());
        assert!(single_state(1.0, 0.5).is_ok());
    }

    #[test]
    fn builtin_names() {
        assert_eq!(parse_builtin_name("garnet-5-2"), Some((false, 5, 2, None)));
        assert_eq!(parse_builtin_name("fh-garnet-3-2-3"), Some((true, 3, 2, Some(3))));
        assert_eq!(parse_builtin_name("grid"), None);
    }
}
