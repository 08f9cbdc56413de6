//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use robust_rrl::mdp::generators::{fh_garnet, garnet, parse_builtin_name, GarnetParams};
use robust_rrl::mdp::{ModelDocument, StateActionDistribution};
use robust_rrl::{FiniteHorizonMdp, PhiDivergence, TabularMdp};

use crate::error::{HarnessError, HarnessResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Rpq,
    Hytq,
    Oracle,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Rpq => "rpq",
            Algorithm::Hytq => "hytq",
            Algorithm::Oracle => "oracle",
        }
    }
}

/// Either a builtin generator (`garnet-N-A`, `fh-garnet-N-A-H`) with
/// optional parameter overrides, or a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Generator seed; the instance is shared by every experiment seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branching: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_state: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_prob: Option<f64>,
}

/// Behavior distribution over (s, a) cells: uniform, or explicit masses in
/// cell order `s * n_actions + a` (normalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Behavior {
    Named(String),
    Masses { masses: Vec<f64> },
}

impl Default for Behavior {
    fn default() -> Self {
        Behavior::Named("uniform".into())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// RPQ: total records N. HyTQ: offline records per step m_off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default)]
    pub behavior: Behavior,
    /// A JSON-lines dataset used for every seed instead of sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

/// Unknown top-level keys are rejected by `from_json` (serde cannot combine
/// `flatten` with `deny_unknown_fields`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub instance: InstanceSpec,
    #[serde(flatten)]
    pub divergence: PhiDivergence,
    pub lambda: f64,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub dataset: DatasetSpec,
    /// K. RPQ defaults to the dataset-size rule; HyTQ requires it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// HyTQ on-policy episodes per iteration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_on: Option<usize>,
    /// Oracle sup-norm tolerance.
    #[serde(default = "default_tol")]
    pub tol: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

const TOP_LEVEL_KEYS: [&str; 11] = [
    "instance",
    "divergence",
    "alpha",
    "lambda",
    "algorithm",
    "dataset",
    "iterations",
    "m_on",
    "tol",
    "seeds",
    "output_dir",
];

fn default_tol() -> f64 {
    1e-10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A resolved instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Instance {
    Discounted(TabularMdp),
    FiniteHorizon(FiniteHorizonMdp),
}

impl Instance {
    pub fn n_states(&self) -> usize {
        match self {
            Instance::Discounted(m) => m.n_states,
            Instance::FiniteHorizon(m) => m.n_states,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Instance::Discounted(m) => m.n_actions,
            Instance::FiniteHorizon(m) => m.n_actions,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Instance::Discounted(_) => "discounted",
            Instance::FiniteHorizon(_) => "finite_horizon",
        }
    }
}

/// Sweepable axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    NSamples,
    Lambda,
    K,
}

impl Axis {
    pub fn parse(name: &str) -> HarnessResult<Self> {
        match name {
            "n_samples" => Ok(Axis::NSamples),
            "lambda" => Ok(Axis::Lambda),
            "K" | "k" | "iterations" => Ok(Axis::K),
            other => Err(HarnessError::Config(format!(
                "unknown sweep axis {other:?} (expected n_samples, lambda or K)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::NSamples => "n_samples",
            Axis::Lambda => "lambda",
            Axis::K => "K",
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> HarnessResult<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config: {e}")))?;
        if let Some(map) = value.as_object() {
            if let Some(key) = map.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
                return Err(HarnessError::Config(format!("config: unknown field `{key}`")));
            }
        }
        let config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| HarnessError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Makes model and dataset paths relative to the config's directory.
    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.instance.file, &mut self.dataset.file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    pub fn validate(&self) -> HarnessResult<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {} must be positive and finite", self.lambda));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol = {} must be positive", self.tol));
        }
        if self.algorithm == Algorithm::Hytq {
            if self.divergence != PhiDivergence::Tv {
                return bad(format!("hytq supports only tv, got {}", self.divergence));
            }
            if self.iterations.is_none() {
                return bad("hytq requires iterations (K)".into());
            }
        }
        if self.iterations == Some(0) {
            return bad("iterations must be at least 1".into());
        }
        if self.m_on == Some(0) {
            return bad("m_on must be at least 1".into());
        }
        if self.dataset.n_samples == Some(0) {
            return bad("dataset.n_samples must be at least 1".into());
        }
        if self.algorithm == Algorithm::Rpq && self.dataset.n_samples.is_none() && self.dataset.file.is_none() {
            return bad("rpq requires dataset.n_samples or dataset.file".into());
        }
        match (&self.instance.builtin, &self.instance.file) {
            (Some(_), Some(_)) | (None, None) => return bad("instance needs exactly one of builtin or file".into()),
            (Some(name), None) => {
                let (fh, ..) = parse_builtin_name(name)
                    .ok_or_else(|| HarnessError::Config(format!("unknown builtin instance {name:?}")))?;
                self.check_kind(fh)?;
            }
            (None, Some(_)) => {}
        }
        if let Behavior::Named(n) = &self.dataset.behavior {
            if n != "uniform" {
                return bad(format!("unknown behavior {n:?} (expected \"uniform\" or {{\"masses\": [...]}})"));
            }
        }
        Ok(())
    }

    fn check_kind(&self, finite_horizon: bool) -> HarnessResult<()> {
        match (self.algorithm, finite_horizon) {
            (Algorithm::Rpq, true) => Err(HarnessError::Config("rpq needs a discounted instance".into())),
            (Algorithm::Hytq, false) => Err(HarnessError::Config("hytq needs a finite-horizon instance".into())),
            _ => Ok(()),
        }
    }

    /// Builds or loads the nominal model.
    pub fn instance(&self) -> HarnessResult<Instance> {
        let instance = if let Some(name) = &self.instance.builtin {
            let (fh, n, a, h) =
                parse_builtin_name(name).ok_or_else(|| HarnessError::Config(format!("unknown builtin {name:?}")))?;
            let mut p = GarnetParams::new(n, a);
            p.seed = self.instance.seed;
            if let Some(g) = self.instance.gamma {
                p.gamma = g;
            }
            if let Some(b) = self.instance.branching {
                p.branching = b;
            }
            if let Some(f) = self.instance.fail_state {
                p.fail_state = f;
            }
            if let Some(f) = self.instance.fail_prob {
                p.fail_prob = f;
            }
            if fh {
                Instance::FiniteHorizon(fh_garnet(&p, h.expect("fh names carry a horizon"))?)
            } else {
                Instance::Discounted(garnet(&p)?)
            }
        } else {
            let path = self.instance.file.as_ref().expect("validated");
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("cannot read model {}: {e}", path.display())))?;
            match ModelDocument::from_json(&text).map_err(|e| HarnessError::Config(e.to_string()))? {
                ModelDocument::Discounted(m) => Instance::Discounted(m),
                ModelDocument::FiniteHorizon(m) => Instance::FiniteHorizon(m),
            }
        };
        self.check_kind(matches!(instance, Instance::FiniteHorizon(_)))?;
        Ok(instance)
    }

    pub fn behavior(&self, n_states: usize, n_actions: usize) -> HarnessResult<StateActionDistribution> {
        match &self.dataset.behavior {
            Behavior::Named(_) => Ok(StateActionDistribution::uniform(n_states, n_actions)),
            Behavior::Masses { masses } => {
                if masses.len() != n_states * n_actions {
                    return Err(HarnessError::Config(format!(
                        "behavior has {} masses for {} cells",
                        masses.len(),
                        n_states * n_actions
                    )));
                }
                Ok(StateActionDistribution::from_masses(n_states, n_actions, masses.clone())?)
            }
        }
    }

    /// A copy with one axis set to `value`.
    pub fn with_axis(&self, axis: Axis, value: f64) -> HarnessResult<Self> {
        let mut c = self.clone();
        let as_count = |v: f64| -> HarnessResult<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v < 1e15 {
                Ok(v as usize)
            } else {
                Err(HarnessError::Config(format!("{v} is not a positive integer")))
            }
        };
        match axis {
            Axis::NSamples => c.dataset.n_samples = Some(as_count(value)?),
            Axis::Lambda => c.lambda = value,
            Axis::K => c.iterations = Some(as_count(value)?),
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "instance": {"builtin": "garnet-5-2", "seed": 1},
        "divergence": "tv", "lambda": 1.0,
        "algorithm": "rpq",
        "dataset": {"n_samples": 100},
        "seeds": [0, 1]
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let c = ExperimentConfig::from_json(BASE).unwrap();
        assert_eq!(c.divergence, PhiDivergence::Tv);
        assert_eq!(c.output_dir, PathBuf::from("out"));
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let Instance::Discounted(m) = c.instance().unwrap() else { panic!() };
        assert_eq!(m.n_states, 6);
    }

    #[test]
    fn cvar_alpha_is_flattened() {
        let text = BASE.replace("\"divergence\": \"tv\"", "\"divergence\": \"cvar\", \"alpha\": 0.5");
        let c = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(c.divergence, PhiDivergence::Cvar { alpha: 0.5 });
    }

    #[test]
    fn rejects_bad_configs() {
        for (from, to) in [
            ("\"seeds\": [0, 1]", "\"seeds\": []"),
            ("\"algorithm\": \"rpq\"", "\"algorithm\": \"hytq\""),
            ("\"lambda\": 1.0", "\"lambda\": -1.0"),
            ("garnet-5-2", "fh-garnet-5-2-3"),
            ("garnet-5-2", "grid-world"),
            ("\"seed\": 1", "\"seed\": 1, \"colour\": 2"),
            ("\"lambda\": 1.0", "\"lambda\": 1.0, \"lamda\": 2.0"),
        ] {
            let text = BASE.replace(from, to);
            let err = ExperimentConfig::from_json(&text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{from} -> {to}: {err}");
        }
    }

    #[test]
    fn axis_overrides() {
        let c = ExperimentConfig::from_json(BASE).unwrap();
        assert_eq!(c.with_axis(Axis::NSamples, 2500.0).unwrap().dataset.n_samples, Some(2500));
        assert_eq!(c.with_axis(Axis::Lambda, 0.5).unwrap().lambda, 0.5);
        assert!(c.with_axis(Axis::K, 2.5).is_err());
        assert!(Axis::parse("gamma").is_err());
    }
}
