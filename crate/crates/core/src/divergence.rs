//! φ-divergences used as model-deviation penalties.
//!
//! Each divergence is described by its generator φ (convex, φ(1) = 0,
//! φ(t) = +∞ for t < 0), its Fenchel conjugate φ*(s) = sup_{t ≥ 0} {st − φ(t)},
//! the bounded interval Θ that contains a minimizer of the scalar dual
//! problem, and three problem constants:
//!
//! - `c1` bounds |λφ*((η − v)/λ) − η| over η ∈ Θ, v ∈ [0, Vmax],
//! - `c2` is its Lipschitz constant in η,
//! - `c3` is max |η| over Θ.
//!
//! | kind | φ(t) | φ*(s) | Θ |
//! |------|------|-------|---|
//! | TV   | \|t − 1\|/2 | −1/2 (s ≤ −1/2), s (\|s\| ≤ 1/2), +∞ (s > 1/2) | [−λ/2, λ/2] |
//! | χ²   | (t − 1)² | (s/2 + 1)₊² − 1 | [−λ, 2Vmax + 2λ] |
//! | KL   | t log t | exp(s − 1) | [λ, Vmax + λ] |
//! | CVaR(α) | 0 on [0, 1/α), +∞ otherwise | (s)₊/α | [0, Vmax/(1 − α)] |
//!
//! The TV interval assumes the value function is grounded at zero by an
//! absorbing fail state.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, RrlError};

/// A real number or +∞.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedReal {
    Finite(f64),
    PlusInfinity,
}

impl ExtendedReal {
    fn from_f64(x: f64) -> Self {
        if x == f64::INFINITY {
            ExtendedReal::PlusInfinity
        } else {
            ExtendedReal::Finite(x)
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            ExtendedReal::Finite(x) => Some(x),
            ExtendedReal::PlusInfinity => None,
        }
    }

    /// Lossy view as a float, mapping +∞ to `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        match self {
            ExtendedReal::Finite(x) => x,
            ExtendedReal::PlusInfinity => f64::INFINITY,
        }
    }
}

impl Serialize for ExtendedReal {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            ExtendedReal::Finite(x) => serializer.serialize_f64(x),
            ExtendedReal::PlusInfinity => serializer.serialize_str("+inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ExtendedReal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(x) => Ok(ExtendedReal::Finite(x)),
            Repr::Text(s) if s == "+inf" || s == "inf" => Ok(ExtendedReal::PlusInfinity),
            Repr::Text(s) => Err(serde::de::Error::custom(format!("not an extended real: {s}"))),
        }
    }
}

/// The supported divergences. `alpha` is the CVaR level, strictly in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DivergenceRepr", into = "DivergenceRepr")]
pub enum PhiDivergence {
    Tv,
    ChiSquare,
    Kl,
    Cvar { alpha: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DivergenceRepr {
    divergence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

impl TryFrom<DivergenceRepr> for PhiDivergence {
    type Error = RrlError;

    fn try_from(repr: DivergenceRepr) -> Result<Self> {
        PhiDivergence::from_name(&repr.divergence, repr.alpha)
    }
}

impl From<PhiDivergence> for DivergenceRepr {
    fn from(div: PhiDivergence) -> Self {
        let alpha = match div {
            PhiDivergence::Cvar { alpha } => Some(alpha),
            _ => None,
        };
        DivergenceRepr {
            divergence: div.name().to_string(),
            alpha,
        }
    }
}

impl std::fmt::Display for PhiDivergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhiDivergence::Cvar { alpha } => write!(f, "cvar({alpha})"),
            other => f.write_str(other.name()),
        }
    }
}

/// The interval Θ searched by the scalar dual problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualDomain {
    pub lo: f64,
    pub hi: f64,
}

impl DualDomain {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(RrlError::InvalidParameter(format!(
                "dual domain [{lo}, {hi}] is not a finite interval"
            )));
        }
        Ok(DualDomain { lo, hi })
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, x: f64, tol: f64) -> bool {
        x >= self.lo - tol && x <= self.hi + tol
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Set when some constant is not strictly positive (e.g. Vmax = 0).
    pub degenerate: bool,
}

impl PhiDivergence {
    pub fn cvar(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(RrlError::InvalidParameter(format!(
                "CVaR level alpha = {alpha} must lie strictly inside (0, 1)"
            )));
        }
        Ok(PhiDivergence::Cvar { alpha })
    }

    /// Parses the config spelling: "tv", "chi2", "kl", or "cvar" with `alpha`.
    pub fn from_name(name: &str, alpha: Option<f64>) -> Result<Self> {
        let div = match name {
            "tv" => PhiDivergence::Tv,
            "chi2" => PhiDivergence::ChiSquare,
            "kl" => PhiDivergence::Kl,
            "cvar" => {
                let alpha = alpha.ok_or_else(|| {
                    RrlError::InvalidParameter("divergence \"cvar\" requires \"alpha\"".into())
                })?;
                return PhiDivergence::cvar(alpha);
            }
            other => {
                return Err(RrlError::InvalidParameter(format!(
                    "unknown divergence {other:?} (expected tv, chi2, kl or cvar)"
                )))
            }
        };
        if alpha.is_some() {
            return Err(RrlError::InvalidParameter(format!(
                "\"alpha\" is only meaningful for cvar, not {name}"
            )));
        }
        Ok(div)
    }

    pub fn name(&self) -> &'static str {
        match self {
            PhiDivergence::Tv => "tv",
            PhiDivergence::ChiSquare => "chi2",
            PhiDivergence::Kl => "kl",
            PhiDivergence::Cvar { .. } => "cvar",
        }
    }

    /// The generator φ(t).
    pub fn phi(&self, t: f64) -> ExtendedReal {
        if t < 0.0 {
            return ExtendedReal::PlusInfinity;
        }
        match *self {
            PhiDivergence::Tv => ExtendedReal::Finite((t - 1.0).abs() / 2.0),
            PhiDivergence::ChiSquare => ExtendedReal::Finite((t - 1.0) * (t - 1.0)),
            PhiDivergence::Kl => {
                if t == 0.0 {
                    ExtendedReal::Finite(0.0)
                } else {
                    ExtendedReal::Finite(t * t.ln())
                }
            }
            PhiDivergence::Cvar { alpha } => {
                if t < 1.0 / alpha {
                    ExtendedReal::Finite(0.0)
                } else {
                    ExtendedReal::PlusInfinity
                }
            }
        }
    }

    /// lim_{t→∞} φ(t)/t, the cost per unit of mass placed where the nominal
    /// distribution has none. Finite only for TV.
    pub fn recession_slope(&self) -> ExtendedReal {
        match self {
            PhiDivergence::Tv => ExtendedReal::Finite(0.5),
            _ => ExtendedReal::PlusInfinity,
        }
    }

    /// The Fenchel conjugate φ*(s).
    pub fn conjugate(&self, s: f64) -> ExtendedReal {
        match *self {
            PhiDivergence::Tv => {
                if s <= -0.5 {
                    ExtendedReal::Finite(-0.5)
                } else if s <= 0.5 {
                    ExtendedReal::Finite(s)
                } else {
                    ExtendedReal::PlusInfinity
                }
            }
            PhiDivergence::ChiSquare => {
                let base = (s / 2.0 + 1.0).max(0.0);
                ExtendedReal::Finite(base * base - 1.0)
            }
            PhiDivergence::Kl => ExtendedReal::from_f64((s - 1.0).exp()),
            PhiDivergence::Cvar { alpha } => ExtendedReal::Finite(s.max(0.0) / alpha),
        }
    }

    /// Right derivative of φ*, used as the deterministic subgradient choice.
    pub fn conjugate_right_derivative(&self, s: f64) -> ExtendedReal {
        match *self {
            PhiDivergence::Tv => {
                if s < -0.5 {
                    ExtendedReal::Finite(0.0)
                } else if s < 0.5 {
                    ExtendedReal::Finite(1.0)
                } else {
                    ExtendedReal::PlusInfinity
                }
            }
            PhiDivergence::ChiSquare => ExtendedReal::Finite((s / 2.0 + 1.0).max(0.0)),
            PhiDivergence::Kl => ExtendedReal::from_f64((s - 1.0).exp()),
            PhiDivergence::Cvar { alpha } => {
                ExtendedReal::Finite(if s >= 0.0 { 1.0 / alpha } else { 0.0 })
            }
        }
    }

    /// D_φ(p, q) for finite distributions of equal length.
    ///
    /// Coordinates with q = 0 contribute p·lim φ(t)/t, which is finite only
    /// for TV (half the moved mass).
    pub fn divergence(&self, p: &[f64], q: &[f64]) -> ExtendedReal {
        let mut total = 0.0;
        for (&pi, &qi) in p.iter().zip(q) {
            if qi > 0.0 {
                match self.phi(pi / qi) {
                    ExtendedReal::Finite(x) => total += qi * x,
                    ExtendedReal::PlusInfinity => return ExtendedReal::PlusInfinity,
                }
            } else if pi > 0.0 {
                match self.recession_slope() {
                    ExtendedReal::Finite(slope) => total += pi * slope,
                    ExtendedReal::PlusInfinity => return ExtendedReal::PlusInfinity,
                }
            }
        }
        ExtendedReal::Finite(total)
    }

    pub fn dual_domain(&self, lambda: f64, v_max: f64) -> Result<DualDomain> {
        check_lambda(lambda)?;
        check_v_max(v_max)?;
        let (lo, hi) = match *self {
            PhiDivergence::Tv => (-lambda / 2.0, lambda / 2.0),
            PhiDivergence::ChiSquare => (-lambda, 2.0 * v_max + 2.0 * lambda),
            PhiDivergence::Kl => (lambda, v_max + lambda),
            PhiDivergence::Cvar { alpha } => (0.0, v_max / (1.0 - alpha)),
        };
        DualDomain::new(lo, hi)
    }

    pub fn constants(&self, lambda: f64, v_max: f64) -> Result<DivergenceConstants> {
        check_lambda(lambda)?;
        check_v_max(v_max)?;
        let (c1, c2, c3) = match *self {
            PhiDivergence::Tv => (2.0 * lambda + v_max, 2.0, lambda / 2.0),
            PhiDivergence::ChiSquare => (
                lambda + (2.0 * v_max + 4.0 * lambda) * (2.0 * v_max / (4.0 * lambda) + 2.0),
                3.0 + v_max / lambda,
                2.0 * v_max + 2.0 * lambda,
            ),
            PhiDivergence::Kl => {
                let e = (v_max / lambda).exp();
                (lambda * (e - 1.0), e + 1.0, v_max + lambda)
            }
            PhiDivergence::Cvar { alpha } => (
                2.0 * v_max / (alpha * (1.0 - alpha)),
                1.0 + 1.0 / alpha,
                v_max / (1.0 - alpha),
            ),
        };
        Ok(DivergenceConstants {
            c1,
            c2,
            c3,
            degenerate: !(c1 > 0.0 && c2 > 0.0 && c3 > 0.0),
        })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(RrlError::InvalidParameter(format!(
            "lambda = {lambda} must be a positive finite number"
        )));
    }
    Ok(())
}

fn check_v_max(v_max: f64) -> Result<()> {
    if !(v_max >= 0.0 && v_max.is_finite()) {
        return Err(RrlError::InvalidParameter(format!(
            "v_max = {v_max} must be a nonnegative finite number"
        )));
    }
    Ok(())
}
