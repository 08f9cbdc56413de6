//! The scalar inner problem of the dual robust Bellman operator.
//!
//! For a value vector `v` distributed by nominal weights `w`, the regularized
//! worst-case expectation
//!
//! ```text
//! inf_{P << P⁰} E_P[v] + λ D_φ(P, P⁰)  =  − inf_{η ∈ Θ} h(η),
//! h(η) = λ Σᵢ wᵢ φ*((η − vᵢ)/λ) − η
//! ```
//!
//! is a one-dimensional convex minimization. The generic route is golden
//! section search over Θ; TV and CVaR have piecewise-linear objectives whose
//! minimum sits on a breakpoint, and KL has a closed form.
//!
//! For TV the interval Θ = [−λ/2, λ/2] presumes the values are grounded at
//! zero (an absorbing zero-value fail state the adversary may move mass to).

use serde::{Deserialize, Serialize};

use crate::divergence::{DualDomain, ExtendedReal, PhiDivergence};
use crate::error::{Result, RrlError};

/// Default argument tolerance of the golden-section search.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Iteration cap of the golden-section search.
pub const MAX_ITERATIONS: usize = 10_000;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Values with a probability vector. Zero-weight entries are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedValues {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedValues {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(RrlError::ShapeMismatch(format!(
                "{} values vs {} weights",
                values.len(),
                weights.len()
            )));
        }
        if values.is_empty() {
            return Err(RrlError::Empty("weighted values".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(RrlError::InvalidParameter(format!("negative weight {w}")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(RrlError::InvalidParameter(format!("non-finite value {v}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(RrlError::Stochasticity {
                row: "weighted values".into(),
                sum,
            });
        }
        let (values, weights) = values
            .into_iter()
            .zip(weights)
            .filter(|(_, w)| *w > 0.0)
            .unzip();
        Ok(WeightedValues { values, weights })
    }

    /// Normalizes nonnegative masses (e.g. sample counts) into weights.
    pub fn from_masses(values: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(RrlError::Empty("no positive mass".into()));
        }
        let mut weights: Vec<f64> = masses.iter().map(|m| m / total).collect();
        // push the rounding residue onto the largest weight
        let residue = 1.0 - weights.iter().sum::<f64>();
        if let Some(i) = argmax(&weights) {
            weights[i] += residue;
        }
        WeightedValues::new(values, weights)
    }

    /// Uniform weights over samples.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        WeightedValues::from_masses(values, vec![1.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn shifted(&self, c: f64) -> WeightedValues {
        WeightedValues {
            values: self.values.iter().map(|v| v + c).collect(),
            weights: self.weights.clone(),
        }
    }
}

fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Result of one inner solve. `eta_star` is expressed in Θ coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerSolution {
    pub eta_star: f64,
    /// inf_P E_P[v] + λ D_φ(P, P⁰), equal to `-dual_objective_at_eta`.
    pub inner_value: f64,
    pub dual_objective_at_eta: f64,
    pub iterations: usize,
}

impl InnerSolution {
    fn at(eta_star: f64, objective: f64, iterations: usize) -> Self {
        InnerSolution {
            eta_star,
            inner_value: -objective,
            dual_objective_at_eta: objective,
            iterations,
        }
    }
}

/// Per-sample dual loss λφ*((η − v)/λ) − η.
pub fn pointwise_dual_loss(div: PhiDivergence, lambda: f64, eta: f64, value: f64) -> Result<f64> {
    let arg = (eta - value) / lambda;
    match div.conjugate(arg) {
        ExtendedReal::Finite(c) => Ok(lambda * c - eta),
        ExtendedReal::PlusInfinity => Err(RrlError::Domain {
            argument: arg,
            context: format!("{div}, eta = {eta}, value = {value}"),
        }),
    }
}

/// h(η) = λ Σᵢ wᵢ φ*((η − vᵢ)/λ) − η.
pub fn dual_objective(div: PhiDivergence, lambda: f64, eta: f64, wv: &WeightedValues) -> Result<f64> {
    check_lambda(lambda)?;
    let mut acc = 0.0;
    for (&v, &w) in wv.values.iter().zip(&wv.weights) {
        let arg = (eta - v) / lambda;
        match div.conjugate(arg) {
            ExtendedReal::Finite(c) => acc += w * c,
            ExtendedReal::PlusInfinity => {
                return Err(RrlError::Domain {
                    argument: arg,
                    context: format!("{div}, eta = {eta}, value = {v}"),
                })
            }
        }
    }
    Ok(lambda * acc - eta)
}

/// h(η), returning +∞ outside the finite domain of φ*.
fn objective_or_inf(div: PhiDivergence, lambda: f64, eta: f64, wv: &WeightedValues) -> f64 {
    dual_objective(div, lambda, eta, wv).unwrap_or(f64::INFINITY)
}

/// The interval Θ for these values, with Vmax taken as the largest value.
pub fn default_domain(div: PhiDivergence, lambda: f64, wv: &WeightedValues) -> Result<DualDomain> {
    div.dual_domain(lambda, wv.max_value().max(0.0))
}

/// Generic golden-section solve of min_{η ∈ Θ} h(η).
pub fn solve_inner_dual(
    div: PhiDivergence,
    lambda: f64,
    wv: &WeightedValues,
    tol: f64,
) -> Result<InnerSolution> {
    let domain = default_domain(div, lambda, wv)?;
    solve_inner_dual_on(div, lambda, wv, domain, tol)
}

/// Golden-section solve over an explicit interval.
pub fn solve_inner_dual_on(
    div: PhiDivergence,
    lambda: f64,
    wv: &WeightedValues,
    domain: DualDomain,
    tol: f64,
) -> Result<InnerSolution> {
    check_lambda(lambda)?;
    if !(tol > 0.0) {
        return Err(RrlError::InvalidParameter(format!("tol = {tol} must be positive")));
    }
    let f = |eta: f64| objective_or_inf(div, lambda, eta, wv);
    let search = golden_section_min(f, domain.lo, domain.hi, tol, MAX_ITERATIONS)?;
    // compare with the endpoints so boundary minima are exact
    let mut best = (search.x, search.fx);
    for eta in [domain.lo, domain.hi] {
        let fx = f(eta);
        if fx < best.1 {
            best = (eta, fx);
        }
    }
    if !best.1.is_finite() {
        // surface the domain error at the returned point
        dual_objective(div, lambda, best.0, wv)?;
    }
    Ok(InnerSolution::at(best.0, best.1, search.iterations))
}

#[derive(Debug, Clone, Copy)]
pub struct ScalarMinimum {
    pub x: f64,
    pub fx: f64,
    pub iterations: usize,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for a unimodal `f` on `[lo, hi]`, stopping once the
/// bracket is narrower than `tol`.
pub fn golden_section_min<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iterations: usize,
) -> Result<ScalarMinimum> {
    let (mut a, mut b) = (lo, hi);
    if b - a <= tol {
        let x = 0.5 * (a + b);
        return Ok(ScalarMinimum { x, fx: f(x), iterations: 0 });
    }
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut iterations = 0;
    while b - a > tol {
        if iterations >= max_iterations {
            return Err(RrlError::NonConvergence {
                iterations,
                residual: b - a,
            });
        }
        iterations += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let (x, fx) = if fc <= fd { (c, fc) } else { (d, fd) };
    Ok(ScalarMinimum { x, fx, iterations })
}

/// −λ log Σᵢ wᵢ exp(−vᵢ/λ), computed with a max shift.
pub fn kl_inner_closed_form(lambda: f64, wv: &WeightedValues) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(-lambda * log_mean_exp_neg(lambda, wv))
}

/// log Σᵢ wᵢ exp(−vᵢ/λ).
fn log_mean_exp_neg(lambda: f64, wv: &WeightedValues) -> f64 {
    let m = wv.min_value();
    let s: f64 = wv
        .values
        .iter()
        .zip(&wv.weights)
        .map(|(v, w)| w * (-(v - m) / lambda).exp())
        .sum();
    -m / lambda + s.ln()
}

/// KL inner solution at the analytic minimizer η* = λ(1 − log Σ w e^{−v/λ}).
pub fn kl_inner_solution(lambda: f64, wv: &WeightedValues) -> Result<InnerSolution> {
    check_lambda(lambda)?;
    let lse = log_mean_exp_neg(lambda, wv);
    let eta = lambda * (1.0 - lse);
    // (η* − v)/λ − 1 = −lse − v/λ stays bounded, so h is evaluated without overflow
    let expected: f64 = wv
        .values
        .iter()
        .zip(&wv.weights)
        .map(|(v, w)| w * (-lse - v / lambda).exp())
        .sum();
    let objective = lambda * expected - eta;
    Ok(InnerSolution::at(eta, objective, 0))
}

/// TV inner problem in the shifted parameterization η' = η + λ/2 ∈ [0, λ]:
/// min_{η'} Σᵢ wᵢ (η' − vᵢ)₊ − η', solved exactly on the breakpoints.
///
/// The returned `eta_star` is in Θ coordinates (η = η' − λ/2).
pub fn tv_inner_piecewise(lambda: f64, wv: &WeightedValues) -> Result<InnerSolution> {
    check_lambda(lambda)?;
    let (shifted, objective) = tv_shifted_minimizer(lambda, wv);
    Ok(InnerSolution::at(shifted - lambda / 2.0, objective, 0))
}

/// Minimizer over η' ∈ [0, λ] of Σ w (η' − v)₊ − η'; ties go to the smallest η'.
pub(crate) fn tv_shifted_minimizer(lambda: f64, wv: &WeightedValues) -> (f64, f64) {
    let objective = |x: f64| -> f64 {
        wv.values
            .iter()
            .zip(&wv.weights)
            .map(|(v, w)| w * (x - v).max(0.0))
            .sum::<f64>()
            - x
    };
    let mut candidates: Vec<f64> = vec![0.0, lambda];
    candidates.extend(wv.values.iter().map(|v| v.clamp(0.0, lambda)));
    minimize_over(&candidates, objective)
}

/// CVaR inner problem min_{η ∈ Θ} Σᵢ wᵢ (η − vᵢ)₊/α − η on the breakpoints.
/// λ does not enter: the CVaR penalty is an indicator.
pub fn cvar_inner_piecewise(alpha: f64, wv: &WeightedValues, domain: DualDomain) -> Result<InnerSolution> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RrlError::InvalidParameter(format!("alpha = {alpha}")));
    }
    let objective = |x: f64| -> f64 {
        wv.values
            .iter()
            .zip(&wv.weights)
            .map(|(v, w)| w * (x - v).max(0.0))
            .sum::<f64>()
            / alpha
            - x
    };
    let mut candidates: Vec<f64> = vec![domain.lo, domain.hi];
    candidates.extend(wv.values.iter().map(|v| domain.clamp(*v)));
    let (eta, value) = minimize_over(&candidates, objective);
    Ok(InnerSolution::at(eta, value, 0))
}

fn minimize_over<F: Fn(f64) -> f64>(candidates: &[f64], f: F) -> (f64, f64) {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (sorted[0], f(sorted[0]));
    for &x in &sorted[1..] {
        let fx = f(x);
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best
}

/// Best available solver per divergence over Θ(λ, Vmax = max v): breakpoint
/// enumeration for TV and CVaR, closed form for KL, golden section for χ².
pub fn solve_inner_exact(
    div: PhiDivergence,
    lambda: f64,
    wv: &WeightedValues,
    tol: f64,
) -> Result<InnerSolution> {
    let domain = default_domain(div, lambda, wv)?;
    solve_inner_exact_on(div, lambda, wv, domain, tol)
}

/// As [`solve_inner_exact`] with an explicit Θ. The exact routes assume
/// Θ contains an unconstrained minimizer, which holds for the Θ of
/// [`PhiDivergence::dual_domain`] whenever Vmax ≥ max v.
pub fn solve_inner_exact_on(
    div: PhiDivergence,
    lambda: f64,
    wv: &WeightedValues,
    domain: DualDomain,
    tol: f64,
) -> Result<InnerSolution> {
    match div {
        PhiDivergence::Tv => {
            if wv.min_value() < 0.0 {
                return Err(RrlError::Domain {
                    argument: wv.min_value(),
                    context: "TV values must be nonnegative (fail-state grounding)".into(),
                });
            }
            tv_inner_piecewise(lambda, wv)
        }
        PhiDivergence::Cvar { alpha } => {
            check_lambda(lambda)?;
            cvar_inner_piecewise(alpha, wv, domain)
        }
        PhiDivergence::Kl => {
            let sol = kl_inner_solution(lambda, wv)?;
            if domain.contains(sol.eta_star, 1e-9 * (1.0 + domain.hi.abs())) {
                Ok(sol)
            } else {
                solve_inner_dual_on(div, lambda, wv, domain, tol)
            }
        }
        PhiDivergence::ChiSquare => solve_inner_dual_on(div, lambda, wv, domain, tol),
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

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn half_half() -> WeightedValues {
        WeightedValues::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn weighted_values_validation() {
        assert!(WeightedValues::new(vec![], vec![]).is_err());
        assert!(WeightedValues::new(vec![1.0], vec![0.5]).is_err());
        assert!(WeightedValues::new(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(WeightedValues::new(vec![1.0, 2.0], vec![1.5, -0.5]).is_err());
        let wv = WeightedValues::new(vec![1.0, 2.0, 3.0], vec![0.5, 0.0, 0.5]).unwrap();
        assert_eq!(wv.values(), &[1.0, 3.0]);
        let wv = WeightedValues::from_masses(vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(wv.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dual_objective_tv_example() {
        let h = dual_objective(PhiDivergence::Tv, 1.0, 0.0, &half_half()).unwrap();
        assert_abs_diff_eq!(h, -0.25, epsilon = 1e-15);
    }

    #[test]
    fn dual_objective_reports_domain_errors() {
        // TV conjugate is infinite above 1/2: eta - v = 0.6 with lambda = 1
        let wv = WeightedValues::new(vec![0.0], vec![1.0]).unwrap();
        let err = dual_objective(PhiDivergence::Tv, 1.0, 0.6, &wv).unwrap_err();
        assert!(matches!(err, RrlError::Domain { .. }));
    }

    #[test]
    fn hand_derived_inner_values() {
        let wv = half_half();
        let tv = solve_inner_dual(PhiDivergence::Tv, 1.0, &wv, DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(tv.inner_value, 0.5, epsilon = 1e-8);
        let chi = solve_inner_dual(PhiDivergence::ChiSquare, 1.0, &wv, DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(chi.inner_value, 0.4375, epsilon = 1e-9);
        let cvar = solve_inner_dual(PhiDivergence::Cvar { alpha: 0.8 }, 1.0, &wv, DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(cvar.inner_value, 0.375, epsilon = 1e-8);
        let kl = solve_inner_dual(PhiDivergence::Kl, 1.0, &wv, DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(kl.inner_value, 0.379_885_493_041_722, epsilon = 1e-9);
    }

    #[test]
    fn cvar_inner_ignores_lambda() {
        let wv = half_half();
        for lambda in [0.01, 1.0, 100.0] {
            let sol = solve_inner_exact(PhiDivergence::Cvar { alpha: 0.8 }, lambda, &wv, DEFAULT_TOL).unwrap();
            assert_abs_diff_eq!(sol.inner_value, 0.375, epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_closed_form_examples() {
        let v = kl_inner_closed_form(1.0, &half_half()).unwrap();
        let expected = -(0.5 * (1.0 + (-1.0f64).exp())).ln();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.379_885, epsilon = 1e-6);
        let c = WeightedValues::new(vec![2.5, 2.5], vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(kl_inner_closed_form(1.0, &c).unwrap(), 2.5, epsilon = 1e-12);
        let big = kl_inner_closed_form(1e6, &half_half()).unwrap();
        assert_abs_diff_eq!(big, 0.5, epsilon = 1e-6);
        // no overflow for tiny lambda and large values
        let wv = WeightedValues::new(vec![500.0, 900.0], vec![0.5, 0.5]).unwrap();
        let v = kl_inner_closed_form(0.01, &wv).unwrap();
        assert_abs_diff_eq!(v, 500.0 + 0.01 * 2f64.ln(), epsilon = 1e-9);
        let sol = kl_inner_solution(0.01, &wv).unwrap();
        assert!(sol.dual_objective_at_eta.is_finite());
        assert_abs_diff_eq!(sol.inner_value, v, epsilon = 1e-9);
    }

    #[test]
    fn kl_closed_form_matches_golden_section() {
        for (lambda, vals) in [(0.3, vec![0.0, 2.0, 5.0]), (1.0, vec![1.0, 1.5]), (7.0, vec![0.2, 9.0, 3.0])] {
            let n = vals.len();
            let wv = WeightedValues::uniform(vals).unwrap();
            assert_eq!(n, wv.len());
            let gs = solve_inner_dual(PhiDivergence::Kl, lambda, &wv, DEFAULT_TOL).unwrap();
            let cf = kl_inner_closed_form(lambda, &wv).unwrap();
            assert_abs_diff_eq!(gs.inner_value, cf, epsilon = 1e-6);
        }
    }

    #[test]
    fn tv_piecewise_examples() {
        let sol = tv_inner_piecewise(1.0, &half_half()).unwrap();
        assert_abs_diff_eq!(sol.eta_star + 0.5, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.inner_value, 0.5, epsilon = 1e-15);
        let sol = tv_inner_piecewise(0.2, &half_half()).unwrap();
        assert_abs_diff_eq!(sol.eta_star + 0.1, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.inner_value, 0.1, epsilon = 1e-15);
        let single = WeightedValues::new(vec![0.7], vec![1.0]).unwrap();
        let sol = tv_inner_piecewise(1.0, &single).unwrap();
        assert_abs_diff_eq!(sol.inner_value, 0.7, epsilon = 1e-15);
        assert!(tv_inner_piecewise(0.0, &single).is_err());
    }

    #[test]
    fn piecewise_routes_agree_with_golden_section() {
        let cases = [
            vec![0.0, 0.3, 2.0],
            vec![0.0, 5.0],
            vec![0.0, 0.1, 0.2],
            vec![1.0, 4.0, 9.0],
        ];
        for vals in cases {
            let wv = WeightedValues::from_masses(vals.clone(), vec![0.2, 0.5, 0.3][..vals.len()].to_vec()).unwrap();
            for lambda in [0.1, 1.0, 10.0] {
                let exact = tv_inner_piecewise(lambda, &wv).unwrap();
                let gs = solve_inner_dual(PhiDivergence::Tv, lambda, &wv, DEFAULT_TOL).unwrap();
                assert_abs_diff_eq!(exact.inner_value, gs.inner_value, epsilon = 1e-8);
            }
            for alpha in [0.3, 0.5, 0.8] {
                let div = PhiDivergence::Cvar { alpha };
                let exact = solve_inner_exact(div, 1.0, &wv, DEFAULT_TOL).unwrap();
                let gs = solve_inner_dual(div, 1.0, &wv, DEFAULT_TOL).unwrap();
                assert_abs_diff_eq!(exact.inner_value, gs.inner_value, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn constant_values_are_unchanged() {
        let c = WeightedValues::new(vec![0.8, 0.8, 0.8], vec![0.2, 0.3, 0.5]).unwrap();
        for div in [
            PhiDivergence::ChiSquare,
            PhiDivergence::Kl,
            PhiDivergence::Cvar { alpha: 0.4 },
        ] {
            let sol = solve_inner_dual(div, 1.0, &c, DEFAULT_TOL).unwrap();
            assert_abs_diff_eq!(sol.inner_value, 0.8, epsilon = 1e-8);
        }
        // TV with lambda >= value: moving mass to the grounded state never pays
        let sol = solve_inner_dual(PhiDivergence::Tv, 1.0, &c, DEFAULT_TOL).unwrap();
        assert_abs_diff_eq!(sol.inner_value, 0.8, epsilon = 1e-8);
    }

    #[test]
    fn solution_invariants() {
        let wv = WeightedValues::new(vec![0.0, 2.0, 3.0], vec![0.3, 0.3, 0.4]).unwrap();
        for div in [
            PhiDivergence::Tv,
            PhiDivergence::ChiSquare,
            PhiDivergence::Kl,
            PhiDivergence::Cvar { alpha: 0.5 },
        ] {
            for solve in [solve_inner_dual, solve_inner_exact] {
                let sol = solve(div, 0.7, &wv, DEFAULT_TOL).unwrap();
                assert_eq!(sol.inner_value, -sol.dual_objective_at_eta);
                let dom = default_domain(div, 0.7, &wv).unwrap();
                assert!(dom.contains(sol.eta_star, 1e-9), "{div}");
                assert!(sol.inner_value <= wv.mean() + 1e-9, "{div}");
                assert!(sol.inner_value >= wv.min_value() - 1e-9, "{div}");
            }
        }
    }

    #[test]
    fn golden_section_rejects_bad_tolerance() {
        assert!(solve_inner_dual(PhiDivergence::Kl, 1.0, &half_half(), 0.0).is_err());
        let err = golden_section_min(|x| x * x, -1.0, 1.0, 1e-30, 50).unwrap_err();
        assert!(matches!(err, RrlError::NonConvergence { .. }));
    }
}
