//! Explicit tabular nominal models, policies, occupancy measures and seeded
//! dataset sampling.

mod dataset;
pub mod generators;
mod occupancy;
mod policy;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RrlError};

pub use dataset::{
    collect_episodes, exact_dataset, exact_dataset_fh, rollout_onpolicy, sample_offline_dataset,
    sample_offline_dataset_fh, EpisodicEnv, Provenance, Simulator, StateActionDistribution,
    TransitionDataset, TransitionRecord,
};
pub use occupancy::{occupancy_measure, occupancy_measure_fh, occupancy_measures_fh, state_distributions_fh};
pub use policy::Policy;

/// Tolerance on row sums of transition tables and distributions.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// A discounted tabular MDP. Cell-indexed tables use `s * n_actions + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s * n_actions + a][s']`
    pub transitions: Vec<Vec<f64>>,
    /// `rewards[s * n_actions + a]`, in [0, 1]
    pub rewards: Vec<f64>,
    pub gamma: f64,
    pub d0: Vec<f64>,
    #[serde(default)]
    pub fail_state: Option<usize>,
}

/// A finite-horizon tabular MDP with step-dependent dynamics. The
/// transition at step h is drawn from `transitions[h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteHorizonMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// `transitions[h][s * n_actions + a][s']`
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[h][s * n_actions + a]`, in [0, 1]
    pub rewards: Vec<Vec<f64>>,
    pub d0: Vec<f64>,
    /// Optional fail state per step.
    #[serde(default)]
    pub fail_states: Vec<Option<usize>>,
}

/// Summary returned by successful validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    pub n_cells: usize,
    pub max_support: usize,
    pub min_positive_probability: f64,
    pub has_fail_state: bool,
}

/// A model file: either kind of MDP, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDocument {
    Discounted(TabularMdp),
    FiniteHorizon(FiniteHorizonMdp),
}

impl ModelDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument =
            serde_json::from_str(text).map_err(|e| RrlError::InvalidModel(e.to_string()))?;
        match &doc {
            ModelDocument::Discounted(m) => m.validate()?,
            ModelDocument::FiniteHorizon(m) => m.validate()?,
        };
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("models serialize")
    }
}

impl TabularMdp {
    /// Builds and validates a model.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        gamma: f64,
        d0: Vec<f64>,
        fail_state: Option<usize>,
    ) -> Result<Self> {
        let mdp = TabularMdp {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
            d0,
            fail_state,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn n_cells(&self) -> usize {
        self.n_states * self.n_actions
    }

    #[inline]
    pub fn cell(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        &self.transitions[self.cell(s, a)]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[self.cell(s, a)]
    }

    /// 1/(1 − γ), the largest attainable discounted return.
    pub fn v_max(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }

    pub fn validate(&self) -> Result<ModelDiagnostics> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(RrlError::InvalidModel("empty state or action space".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(RrlError::InvalidModel(format!("gamma = {} not in (0, 1)", self.gamma)));
        }
        let stats = validate_step(
            self.n_states,
            self.n_actions,
            &self.transitions,
            &self.rewards,
            self.fail_state,
            "",
        )?;
        validate_distribution(&self.d0, self.n_states, "d0")?;
        Ok(ModelDiagnostics {
            n_cells: self.n_cells(),
            max_support: stats.0,
            min_positive_probability: stats.1,
            has_fail_state: self.fail_state.is_some(),
        })
    }

    /// The same dynamics as a finite-horizon model with stationary tables.
    pub fn to_finite_horizon(&self, horizon: usize) -> FiniteHorizonMdp {
        FiniteHorizonMdp {
            n_states: self.n_states,
            n_actions: self.n_actions,
            horizon,
            transitions: vec![self.transitions.clone(); horizon],
            rewards: vec![self.rewards.clone(); horizon],
            d0: self.d0.clone(),
            fail_states: vec![self.fail_state; horizon],
        }
    }
}

impl FiniteHorizonMdp {
    pub fn n_cells(&self) -> usize {
        self.n_states * self.n_actions
    }

    #[inline]
    pub fn cell(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        &self.transitions[h][self.cell(s, a)]
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[h][self.cell(s, a)]
    }

    /// H, the largest attainable return.
    pub fn v_max(&self) -> f64 {
        self.horizon as f64
    }

    pub fn fail_state(&self, h: usize) -> Option<usize> {
        self.fail_states.get(h).copied().flatten()
    }

    /// True when every step declares a fail state.
    pub fn has_fail_states(&self) -> bool {
        self.fail_states.len() == self.horizon && self.fail_states.iter().all(Option::is_some)
    }

    pub fn validate(&self) -> Result<ModelDiagnostics> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(RrlError::InvalidModel("empty state or action space".into()));
        }
        if self.horizon == 0 {
            return Err(RrlError::InvalidModel("horizon must be at least 1".into()));
        }
        if self.transitions.len() != self.horizon || self.rewards.len() != self.horizon {
            return Err(RrlError::ShapeMismatch(format!(
                "horizon {} but {} transition and {} reward tables",
                self.horizon,
                self.transitions.len(),
                self.rewards.len()
            )));
        }
        if !self.fail_states.is_empty() && self.fail_states.len() != self.horizon {
            return Err(RrlError::ShapeMismatch(format!(
                "horizon {} but {} fail-state entries",
                self.horizon,
                self.fail_states.len()
            )));
        }
        let mut max_support = 0;
        let mut min_pos = f64::INFINITY;
        for h in 0..self.horizon {
            let (sup, mp) = validate_step(
                self.n_states,
                self.n_actions,
                &self.transitions[h],
                &self.rewards[h],
                self.fail_state(h),
                &format!("h={h}, "),
            )?;
            max_support = max_support.max(sup);
            min_pos = min_pos.min(mp);
        }
        validate_distribution(&self.d0, self.n_states, "d0")?;
        Ok(ModelDiagnostics {
            n_cells: self.n_cells(),
            max_support,
            min_positive_probability: min_pos,
            has_fail_state: self.has_fail_states(),
        })
    }
}

/// Checks one step's tables; returns (max support size, min positive probability).
fn validate_step(
    n_states: usize,
    n_actions: usize,
    transitions: &[Vec<f64>],
    rewards: &[f64],
    fail_state: Option<usize>,
    label: &str,
) -> Result<(usize, f64)> {
    let n_cells = n_states * n_actions;
    if transitions.len() != n_cells || rewards.len() != n_cells {
        return Err(RrlError::ShapeMismatch(format!(
            "{label}expected {n_cells} cells, got {} transition rows and {} rewards",
            transitions.len(),
            rewards.len()
        )));
    }
    let mut max_support = 0;
    let mut min_pos = f64::INFINITY;
    for s in 0..n_states {
        for a in 0..n_actions {
            let c = s * n_actions + a;
            let row = &transitions[c];
            let name = format!("{label}row (s={s}, a={a})");
            validate_distribution(row, n_states, &name)?;
            let r = rewards[c];
            if !(0.0..=1.0).contains(&r) {
                return Err(RrlError::InvalidModel(format!("{label}reward r(s={s}, a={a}) = {r} outside [0, 1]")));
            }
            let support = row.iter().filter(|p| **p > 0.0).count();
            max_support = max_support.max(support);
            min_pos = row.iter().copied().filter(|p| *p > 0.0).fold(min_pos, f64::min);
        }
    }
    if let Some(f) = fail_state {
        if f >= n_states {
            return Err(RrlError::FailState {
                state: f,
                reason: format!("{label}index out of range"),
            });
        }
        for a in 0..n_actions {
            let c = f * n_actions + a;
            if rewards[c] != 0.0 {
                return Err(RrlError::FailState {
                    state: f,
                    reason: format!("{label}reward under action {a} is {} (must be 0)", rewards[c]),
                });
            }
            if transitions[c][f] != 1.0 {
                return Err(RrlError::FailState {
                    state: f,
                    reason: format!("{label}action {a} is not an absorbing self-loop"),
                });
            }
        }
    }
    Ok((max_support, min_pos))
}

pub(crate) fn validate_distribution(p: &[f64], len: usize, name: &str) -> Result<()> {
    if p.len() != len {
        return Err(RrlError::ShapeMismatch(format!("{name}: length {} (expected {len})", p.len())));
    }
    if let Some(x) = p.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
        return Err(RrlError::InvalidModel(format!("{name}: invalid probability {x}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(RrlError::Stochasticity { row: name.to_string(), sum });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> TabularMdp {
        TabularMdp::new(
            2,
            1,
            vec![vec![0.5, 0.5], vec![0.0, 1.0]],
            vec![1.0, 0.0],
            0.9,
            vec![1.0, 0.0],
            Some(1),
        )
        .unwrap()
    }

    #[test]
    fn valid_model_passes() {
        let d = two_state().validate().unwrap();
        assert_eq!(d.max_support, 2);
        assert!(d.has_fail_state);
    }

    #[test]
    fn bad_row_sum_is_named() {
        let mut m = two_state();
        m.transitions[0] = vec![0.5, 0.4];
        match m.validate().unwrap_err() {
            RrlError::Stochasticity { row, sum } => {
                assert!(row.contains("s=0, a=0"), "{row}");
                assert!((sum - 0.9).abs() < 1e-12);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn fail_state_with_reward_rejected() {
        let mut m = two_state();
        m.rewards[1] = 0.1;
        assert!(matches!(m.validate().unwrap_err(), RrlError::FailState { state: 1, .. }));
        let mut m = two_state();
        m.transitions[1] = vec![0.5, 0.5];
        assert!(matches!(m.validate().unwrap_err(), RrlError::FailState { .. }));
    }

    #[test]
    fn other_invalid_inputs() {
        let mut m = two_state();
        m.gamma = 1.0;
        assert!(m.validate().is_err());
        let mut m = two_state();
        m.rewards[0] = 1.5;
        assert!(m.validate().is_err());
        let mut m = two_state();
        m.d0 = vec![1.0];
        assert!(matches!(m.validate().unwrap_err(), RrlError::ShapeMismatch(_)));
    }

    #[test]
    fn model_document_round_trip() {
        let doc = ModelDocument::Discounted(two_state());
        let back = ModelDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(doc, back);
        let fh = ModelDocument::FiniteHorizon(two_state().to_finite_horizon(3));
        assert_eq!(ModelDocument::from_json(&fh.to_json()).unwrap(), fh);
        let mut bad = two_state();
        bad.transitions[0] = vec![0.7, 0.7];
        assert!(ModelDocument::from_json(&ModelDocument::Discounted(bad).to_json()).is_err());
    }

    #[test]
    fn finite_horizon_validation() {
        let mut fh = two_state().to_finite_horizon(2);
        assert!(fh.validate().is_ok());
        assert!(fh.has_fail_states());
        fh.rewards.pop();
        assert!(fh.validate().is_err());
    }
}
