use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RrlError};
use crate::rng::Rng;

use super::ROW_SUM_TOL;

/// A Markov policy. Non-stationary tables are indexed `[h][s]`; a mixture
/// draws one member per episode and follows it throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "table", rename_all = "snake_case")]
pub enum Policy {
    StationaryDeterministic(Vec<usize>),
    StationaryStochastic(Vec<Vec<f64>>),
    NonstationaryDeterministic(Vec<Vec<usize>>),
    NonstationaryStochastic(Vec<Vec<Vec<f64>>>),
    Mixture { members: Vec<Policy>, weights: Vec<f64> },
}

impl Policy {
    /// Uniformly random stationary policy.
    pub fn uniform(n_states: usize, n_actions: usize) -> Policy {
        Policy::StationaryStochastic(vec![vec![1.0 / n_actions as f64; n_actions]; n_states])
    }

    pub fn is_stationary(&self) -> bool {
        match self {
            Policy::StationaryDeterministic(_) | Policy::StationaryStochastic(_) => true,
            Policy::NonstationaryDeterministic(_) | Policy::NonstationaryStochastic(_) => false,
            Policy::Mixture { members, .. } => members.iter().all(Policy::is_stationary),
        }
    }

    pub fn is_mixture(&self) -> bool {
        matches!(self, Policy::Mixture { .. })
    }

    /// Action distribution at (h, s). For a mixture this is the
    /// weight-averaged marginal, which is not the per-episode law.
    pub fn action_probs(&self, h: usize, s: usize, n_actions: usize) -> Vec<f64> {
        let mut p = vec![0.0; n_actions];
        self.accumulate_probs(h, s, 1.0, &mut p);
        p
    }

    fn accumulate_probs(&self, h: usize, s: usize, scale: f64, out: &mut [f64]) {
        match self {
            Policy::StationaryDeterministic(t) => out[t[s]] += scale,
            Policy::StationaryStochastic(t) => {
                for (o, p) in out.iter_mut().zip(&t[s]) {
                    *o += scale * p;
                }
            }
            Policy::NonstationaryDeterministic(t) => out[t[h][s]] += scale,
            Policy::NonstationaryStochastic(t) => {
                for (o, p) in out.iter_mut().zip(&t[h][s]) {
                    *o += scale * p;
                }
            }
            Policy::Mixture { members, weights } => {
                for (m, w) in members.iter().zip(weights) {
                    m.accumulate_probs(h, s, scale * w, out);
                }
            }
        }
    }

    /// Deterministic action at (h, s), if this policy is deterministic there.
    pub fn deterministic_action(&self, h: usize, s: usize) -> Option<usize> {
        match self {
            Policy::StationaryDeterministic(t) => Some(t[s]),
            Policy::NonstationaryDeterministic(t) => Some(t[h][s]),
            _ => None,
        }
    }

    /// Samples an action for a non-mixture policy.
    pub fn sample_action(&self, h: usize, s: usize, rng: &mut Rng) -> usize {
        match self {
            Policy::StationaryDeterministic(t) => t[s],
            Policy::NonstationaryDeterministic(t) => t[h][s],
            Policy::StationaryStochastic(t) => sample_index(&t[s], rng),
            Policy::NonstationaryStochastic(t) => sample_index(&t[h][s], rng),
            Policy::Mixture { .. } => {
                // callers resolve mixtures once per episode; fall back to the marginal
                let n = self.max_action_hint().unwrap_or(1);
                sample_index(&self.action_probs(h, s, n), rng)
            }
        }
    }

    fn max_action_hint(&self) -> Option<usize> {
        match self {
            Policy::StationaryStochastic(t) => t.first().map(Vec::len),
            Policy::NonstationaryStochastic(t) => t.first().and_then(|x| x.first()).map(Vec::len),
            Policy::StationaryDeterministic(t) => t.iter().max().map(|m| m + 1),
            Policy::NonstationaryDeterministic(t) => t.iter().flatten().max().map(|m| m + 1),
            Policy::Mixture { members, .. } => members.iter().filter_map(Policy::max_action_hint).max(),
        }
    }

    /// Resolves a mixture into the member followed for one episode.
    pub fn episode_member<'a>(&'a self, rng: &mut Rng) -> &'a Policy {
        match self {
            Policy::Mixture { members, weights } => members[sample_index(weights, rng)].episode_member(rng),
            other => other,
        }
    }

    /// Checks shapes and stochasticity against a model. `horizon` is `None`
    /// for discounted models (stationary policies only).
    pub fn validate(&self, n_states: usize, n_actions: usize, horizon: Option<usize>) -> Result<()> {
        let check_det = |t: &[usize], ctx: &str| -> Result<()> {
            if t.len() != n_states {
                return Err(RrlError::ShapeMismatch(format!("{ctx}: {} states (expected {n_states})", t.len())));
            }
            if let Some(a) = t.iter().find(|a| **a >= n_actions) {
                return Err(RrlError::InvalidParameter(format!("{ctx}: action {a} out of range")));
            }
            Ok(())
        };
        let check_stoch = |t: &[Vec<f64>], ctx: &str| -> Result<()> {
            if t.len() != n_states {
                return Err(RrlError::ShapeMismatch(format!("{ctx}: {} states (expected {n_states})", t.len())));
            }
            for (s, row) in t.iter().enumerate() {
                super::validate_distribution(row, n_actions, &format!("{ctx} state {s}"))?;
            }
            Ok(())
        };
        let check_h = |len: usize| -> Result<()> {
            match horizon {
                None => Err(RrlError::InvalidParameter(
                    "non-stationary policy on a discounted model".into(),
                )),
                Some(hh) if hh != len => Err(RrlError::ShapeMismatch(format!(
                    "policy has {len} steps, model horizon is {hh}"
                ))),
                _ => Ok(()),
            }
        };
        match self {
            Policy::StationaryDeterministic(t) => check_det(t, "policy"),
            Policy::StationaryStochastic(t) => check_stoch(t, "policy"),
            Policy::NonstationaryDeterministic(t) => {
                check_h(t.len())?;
                t.iter().enumerate().try_for_each(|(h, x)| check_det(x, &format!("policy h={h}")))
            }
            Policy::NonstationaryStochastic(t) => {
                check_h(t.len())?;
                t.iter().enumerate().try_for_each(|(h, x)| check_stoch(x, &format!("policy h={h}")))
            }
            Policy::Mixture { members, weights } => {
                if members.is_empty() {
                    return Err(RrlError::Empty("mixture members".into()));
                }
                super::validate_distribution(weights, members.len(), "mixture weights")?;
                members.iter().try_for_each(|m| m.validate(n_states, n_actions, horizon))
            }
        }
    }
}

/// Samples an index from a probability vector by inversion.
pub(crate) fn sample_index(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    debug_assert!((acc - 1.0).abs() <= 1e3 * ROW_SUM_TOL + 1e-9);
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn action_probs_and_validation() {
        let p = Policy::uniform(3, 2);
        assert!(p.validate(3, 2, None).is_ok());
        assert_eq!(p.action_probs(0, 1, 2), vec![0.5, 0.5]);
        let ns = Policy::NonstationaryDeterministic(vec![vec![0, 1], vec![1, 1]]);
        assert!(ns.validate(2, 2, Some(2)).is_ok());
        assert!(ns.validate(2, 2, None).is_err());
        assert!(ns.validate(2, 2, Some(3)).is_err());
        assert_eq!(ns.action_probs(1, 0, 2), vec![0.0, 1.0]);
        let bad = Policy::StationaryStochastic(vec![vec![0.5, 0.6]]);
        assert!(bad.validate(1, 2, None).is_err());
        let mix = Policy::Mixture {
            members: vec![Policy::StationaryDeterministic(vec![0]), Policy::StationaryDeterministic(vec![1])],
            weights: vec![0.25, 0.75],
        };
        assert!(mix.validate(1, 2, None).is_ok());
        assert_eq!(mix.action_probs(0, 0, 2), vec![0.25, 0.75]);
    }

    #[test]
    fn sampling_never_picks_zero_mass() {
        let mut r = rng::stream(1, 1);
        for _ in 0..1000 {
            assert_ne!(sample_index(&[0.3, 0.0, 0.7], &mut r), 1);
        }
    }

    #[test]
    fn serde_round_trip() {
        let p = Policy::Mixture {
            members: vec![Policy::NonstationaryDeterministic(vec![vec![0, 1]])],
            weights: vec![1.0],
        };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<Policy>(&s).unwrap(), p);
    }
}
