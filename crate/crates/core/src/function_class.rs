//! Function classes for Q-functions (range [0, Vmax]) and dual-variable
//! functions (range Θ), with least-squares and empirical-risk fitting.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::divergence::{DualDomain, ExtendedReal, PhiDivergence};
use crate::dual::{solve_inner_exact_on, tv_shifted_minimizer, WeightedValues, DEFAULT_TOL};
use crate::error::{Result, RrlError};
use crate::oracle::QTable;
use crate::rng;

/// Provenance of a feature table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    OneHotTabular,
    UserTable,
}

/// Features φ(h, s, a) ∈ R^d stored as a dense table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n_steps: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub dim: usize,
    pub kind: FeatureKind,
    /// Row-major `[(h * n_states + s) * n_actions + a][j]`.
    table: Vec<f64>,
    /// max over inputs of ‖φ(h, s, a)‖₂.
    pub max_norm: f64,
}

impl FeatureMap {
    /// Indicator features of (h, s, a); d = n_steps · n_states · n_actions.
    pub fn one_hot(n_steps: usize, n_states: usize, n_actions: usize) -> Self {
        let n = n_steps * n_states * n_actions;
        let mut table = vec![0.0; n * n];
        for i in 0..n {
            table[i * n + i] = 1.0;
        }
        FeatureMap {
            n_steps,
            n_states,
            n_actions,
            dim: n,
            kind: FeatureKind::OneHotTabular,
            table,
            max_norm: 1.0,
        }
    }

    /// User-supplied features, one row per (h, s, a) in index order.
    pub fn from_rows(n_steps: usize, n_states: usize, n_actions: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = n_steps * n_states * n_actions;
        if rows.len() != n || rows.is_empty() {
            return Err(RrlError::ShapeMismatch(format!("{} feature rows for {n} inputs", rows.len())));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(RrlError::ShapeMismatch("feature rows must share a positive dimension".into()));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(RrlError::InvalidParameter("features must be finite".into()));
        }
        let max_norm = rows
            .iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Ok(FeatureMap {
            n_steps,
            n_states,
            n_actions,
            dim,
            kind: FeatureKind::UserTable,
            table: rows.into_iter().flatten().collect(),
            max_norm,
        })
    }

    #[inline]
    pub fn features(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let i = (h * self.n_states + s) * self.n_actions + a;
        &self.table[i * self.dim..(i + 1) * self.dim]
    }
}

/// A class F or G of functions over (h, s, a).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionClass {
    Tabular { n_steps: usize, n_states: usize, n_actions: usize },
    Linear { features: Arc<FeatureMap> },
}

impl FunctionClass {
    pub fn tabular(n_steps: usize, n_states: usize, n_actions: usize) -> Self {
        FunctionClass::Tabular { n_steps, n_states, n_actions }
    }

    pub fn linear(features: FeatureMap) -> Self {
        FunctionClass::Linear { features: Arc::new(features) }
    }

    /// (n_steps, n_states, n_actions)
    pub fn shape(&self) -> (usize, usize, usize) {
        match self {
            FunctionClass::Tabular { n_steps, n_states, n_actions } => (*n_steps, *n_states, *n_actions),
            FunctionClass::Linear { features } => (features.n_steps, features.n_states, features.n_actions),
        }
    }

    fn n_inputs(&self) -> usize {
        let (h, s, a) = self.shape();
        h * s * a
    }

    fn input_index(&self, (h, s, a): Input) -> usize {
        let (_, ns, na) = self.shape();
        (h * ns + s) * na + a
    }

    fn check_inputs(&self, inputs: &[Input]) -> Result<()> {
        let (nh, ns, na) = self.shape();
        if let Some(x) = inputs.iter().find(|(h, s, a)| *h >= nh || *s >= ns || *a >= na) {
            return Err(RrlError::InvalidParameter(format!("input {x:?} outside the class domain")));
        }
        Ok(())
    }

    fn zero_representation(&self) -> Representation {
        match self {
            FunctionClass::Tabular { .. } => Representation::Table(vec![0.0; self.n_inputs()]),
            FunctionClass::Linear { features } => Representation::Weights(vec![0.0; features.dim]),
        }
    }
}

/// An (h, s, a) input.
pub type Input = (usize, usize, usize);

/// Parameters of a class member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// One value per (h, s, a).
    Table(Vec<f64>),
    /// Linear weights over the class features.
    Weights(Vec<f64>),
}

fn raw_eval(class: &FunctionClass, repr: &Representation, x: Input) -> f64 {
    match (class, repr) {
        (FunctionClass::Tabular { .. }, Representation::Table(t)) => t[class.input_index(x)],
        (FunctionClass::Linear { features }, Representation::Weights(w)) => {
            features.features(x.0, x.1, x.2).iter().zip(w).map(|(f, w)| f * w).sum()
        }
        _ => unreachable!("representation matches its class by construction"),
    }
}

fn check_repr(class: &FunctionClass, repr: &Representation) -> Result<()> {
    let ok = match (class, repr) {
        (FunctionClass::Tabular { .. }, Representation::Table(t)) => t.len() == class.n_inputs(),
        (FunctionClass::Linear { features }, Representation::Weights(w)) => w.len() == features.dim,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(RrlError::ShapeMismatch("representation does not match its class".into()))
    }
}

/// A member of F, clipped to [0, v_max].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub class: FunctionClass,
    pub repr: Representation,
    pub v_max: f64,
}

impl QFunction {
    pub fn new(class: FunctionClass, repr: Representation, v_max: f64) -> Result<Self> {
        check_repr(&class, &repr)?;
        Ok(QFunction { class, repr, v_max })
    }

    /// The zero function (Q₀ ≡ 0).
    pub fn zero(class: FunctionClass, v_max: f64) -> Self {
        let repr = class.zero_representation();
        QFunction { class, repr, v_max }
    }

    /// A tabular member holding a Q table.
    pub fn from_qtable(q: &QTable, v_max: f64) -> Self {
        QFunction {
            class: FunctionClass::tabular(q.n_steps, q.n_states, q.n_actions),
            repr: Representation::Table(q.values.clone()),
            v_max,
        }
    }

    pub fn evaluate(&self, h: usize, s: usize, a: usize) -> f64 {
        raw_eval(&self.class, &self.repr, (h, s, a)).clamp(0.0, self.v_max)
    }

    pub fn n_actions(&self) -> usize {
        self.class.shape().2
    }

    /// Lowest-index argmax over actions.
    pub fn greedy_action(&self, h: usize, s: usize) -> usize {
        let mut best = 0;
        let mut best_v = self.evaluate(h, s, 0);
        for a in 1..self.n_actions() {
            let v = self.evaluate(h, s, a);
            if v > best_v {
                best = a;
                best_v = v;
            }
        }
        best
    }

    pub fn state_value(&self, h: usize, s: usize) -> f64 {
        (0..self.n_actions()).map(|a| self.evaluate(h, s, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// The clipped values as a table over every input.
    pub fn to_qtable(&self) -> QTable {
        let (nh, ns, na) = self.class.shape();
        let mut q = QTable::zeros(nh, ns, na);
        for h in 0..nh {
            for s in 0..ns {
                for a in 0..na {
                    q.set(h, s, a, self.evaluate(h, s, a));
                }
            }
        }
        q
    }
}

/// A member of G, clipped to the dual domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualFunction {
    pub class: FunctionClass,
    pub repr: Representation,
    pub domain: DualDomain,
}

impl DualFunction {
    pub fn new(class: FunctionClass, repr: Representation, domain: DualDomain) -> Result<Self> {
        check_repr(&class, &repr)?;
        Ok(DualFunction { class, repr, domain })
    }

    /// The constant function at the domain's lower end.
    pub fn lower_constant(class: FunctionClass, domain: DualDomain) -> Self {
        let repr = match &class {
            FunctionClass::Tabular { .. } => Representation::Table(vec![domain.lo; class.n_inputs()]),
            FunctionClass::Linear { features } => Representation::Weights(vec![0.0; features.dim]),
        };
        DualFunction { class, repr, domain }
    }

    pub fn evaluate(&self, h: usize, s: usize, a: usize) -> f64 {
        self.domain.clamp(raw_eval(&self.class, &self.repr, (h, s, a)))
    }
}

// ---------------------------------------------------------------------------
// Least squares
// ---------------------------------------------------------------------------

/// Ridge regularization of the normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum Ridge {
    /// 1e-8 · trace(Gram)/d.
    #[default]
    Auto,
    Value(f64),
}


fn check_fit_data(inputs: &[Input], targets: &[f64], weights: Option<&[f64]>) -> Result<()> {
    if inputs.is_empty() {
        return Err(RrlError::Empty("fit data".into()));
    }
    if inputs.len() != targets.len() || weights.is_some_and(|w| w.len() != inputs.len()) {
        return Err(RrlError::ShapeMismatch("inputs, targets and weights must have equal length".into()));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(RrlError::InvalidParameter("targets must be finite".into()));
    }
    if weights.is_some_and(|w| w.iter().any(|x| !(*x > 0.0 && x.is_finite()))) {
        return Err(RrlError::InvalidParameter("weights must be positive and finite".into()));
    }
    Ok(())
}

/// Weighted least squares over the class, then range-clipped on evaluation.
/// Tabular classes take per-cell weighted means (empty cells fit 0); linear
/// classes solve the (ridge-regularized) normal equations.
pub fn least_squares_fit(
    class: &FunctionClass,
    inputs: &[Input],
    targets: &[f64],
    weights: Option<&[f64]>,
    ridge: Ridge,
    v_max: f64,
) -> Result<QFunction> {
    check_fit_data(inputs, targets, weights)?;
    class.check_inputs(inputs)?;
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let repr = match class {
        FunctionClass::Tabular { .. } => {
            let n = class.n_inputs();
            let mut sum = vec![0.0; n];
            let mut mass = vec![0.0; n];
            for (i, (&x, &y)) in inputs.iter().zip(targets).enumerate() {
                let c = class.input_index(x);
                sum[c] += w(i) * y;
                mass[c] += w(i);
            }
            Representation::Table(
                sum.iter()
                    .zip(&mass)
                    .map(|(s, m)| if *m > 0.0 { s / m } else { 0.0 })
                    .collect(),
            )
        }
        FunctionClass::Linear { features } => {
            let d = features.dim;
            let mut gram = DMatrix::<f64>::zeros(d, d);
            let mut rhs = DVector::<f64>::zeros(d);
            for (i, (&(h, s, a), &y)) in inputs.iter().zip(targets).enumerate() {
                let phi = DVector::from_column_slice(features.features(h, s, a));
                gram.ger(w(i), &phi, &phi, 1.0);
                rhs.axpy(w(i) * y, &phi, 1.0);
            }
            let lambda = match ridge {
                Ridge::Auto => 1e-8 * gram.trace() / d as f64,
                Ridge::Value(r) if r >= 0.0 => r,
                Ridge::Value(r) => return Err(RrlError::InvalidParameter(format!("ridge = {r}"))),
            };
            Representation::Weights(solve_normal_equations(gram, rhs, lambda)?.as_slice().to_vec())
        }
    };
    QFunction::new(class.clone(), repr, v_max)
}

fn solve_normal_equations(mut gram: DMatrix<f64>, rhs: DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let d = gram.nrows();
    if ridge == 0.0 {
        let svd = gram.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-12 * smax.max(1e-300)).count();
        if rank < d {
            return Err(RrlError::SingularSystem);
        }
        return svd.solve(&rhs, 0.0).map_err(|_| RrlError::SingularSystem);
    }
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    match gram.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&rhs)),
        None => gram.lu().solve(&rhs).ok_or(RrlError::SingularSystem),
    }
}

// ---------------------------------------------------------------------------
// Dual ERM
// ---------------------------------------------------------------------------

/// Per-sample dual loss ℓ(g; v) minimized by the dual ERM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DualLoss {
    /// λφ*((g − v)/λ) − g over Θ.
    Phi { div: PhiDivergence, lambda: f64 },
    /// (g − v)₊ − g over [0, λ] (TV in shifted coordinates).
    ShiftedTv { lambda: f64 },
}

impl DualLoss {
    pub fn value(&self, g: f64, v: f64) -> Result<f64> {
        match *self {
            DualLoss::Phi { div, lambda } => crate::dual::pointwise_dual_loss(div, lambda, g, v),
            DualLoss::ShiftedTv { .. } => Ok((g - v).max(0.0) - g),
        }
    }

    /// A subgradient in g: the right derivative, or the left one where the
    /// right derivative is infinite (the upper end of TV's domain).
    pub fn derivative(&self, g: f64, v: f64) -> f64 {
        match *self {
            DualLoss::Phi { div, lambda } => {
                let s = (g - v) / lambda;
                match div.conjugate_right_derivative(s) {
                    ExtendedReal::Finite(d) => d - 1.0,
                    ExtendedReal::PlusInfinity => match div {
                        PhiDivergence::Tv => 0.0,
                        _ => f64::INFINITY,
                    },
                }
            }
            DualLoss::ShiftedTv { .. } => {
                if g >= v {
                    0.0
                } else {
                    -1.0
                }
            }
        }
    }

    /// The range of g for values in [0, v_max].
    pub fn domain(&self, v_max: f64) -> Result<DualDomain> {
        match *self {
            DualLoss::Phi { div, lambda } => div.dual_domain(lambda, v_max),
            DualLoss::ShiftedTv { lambda } => DualDomain::new(0.0, lambda),
        }
    }

    /// (Lipschitz constant in g, max |g| over the domain).
    pub fn lipschitz_and_radius(&self, v_max: f64) -> Result<(f64, f64)> {
        match *self {
            DualLoss::Phi { div, lambda } => {
                let c = div.constants(lambda, v_max)?;
                Ok((c.c2, c.c3))
            }
            DualLoss::ShiftedTv { lambda } => Ok((1.0, lambda)),
        }
    }

    /// Exact minimizer over `domain` of the weighted empirical loss of one cell.
    fn minimize_cell(&self, wv: &WeightedValues, domain: DualDomain) -> Result<f64> {
        match *self {
            DualLoss::Phi { div, lambda } => Ok(solve_inner_exact_on(div, lambda, wv, domain, DEFAULT_TOL)?.eta_star),
            DualLoss::ShiftedTv { lambda } => Ok(tv_shifted_minimizer(lambda, wv).0),
        }
    }
}

/// Knobs of the linear-class subgradient ERM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErmOptions {
    pub iterations: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ErmOptions {
    fn default() -> Self {
        ErmOptions { iterations: 2000, restarts: 5, seed: 0 }
    }
}

/// Weighted mean of ℓ(g(xᵢ); vᵢ).
pub fn empirical_loss(
    g: &DualFunction,
    loss: &DualLoss,
    inputs: &[Input],
    next_values: &[f64],
    weights: Option<&[f64]>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut mass = 0.0;
    for (i, (&(h, s, a), &v)) in inputs.iter().zip(next_values).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        total += w * loss.value(g.evaluate(h, s, a), v).map_err(|e| e.context(format!("record {i}")))?;
        mass += w;
    }
    Ok(total / mass)
}

/// argmin over the class G (range `domain`) of the weighted empirical dual
/// loss. Tabular classes are solved exactly per cell (empty cells take
/// `domain.lo`); linear classes use projected subgradient descent.
pub fn erm_dual_fit(
    class: &FunctionClass,
    inputs: &[Input],
    next_values: &[f64],
    weights: Option<&[f64]>,
    loss: &DualLoss,
    domain: DualDomain,
    opts: &ErmOptions,
) -> Result<DualFunction> {
    check_fit_data(inputs, next_values, weights)?;
    class.check_inputs(inputs)?;
    match class {
        FunctionClass::Tabular { .. } => {
            let n = class.n_inputs();
            let mut cells: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); n];
            for (i, (&x, &v)) in inputs.iter().zip(next_values).enumerate() {
                let c = class.input_index(x);
                cells[c].0.push(v);
                cells[c].1.push(weights.map_or(1.0, |w| w[i]));
            }
            let mut table = vec![domain.lo; n];
            for (c, (vals, masses)) in cells.into_iter().enumerate() {
                if vals.is_empty() {
                    continue;
                }
                let wv = WeightedValues::from_masses(vals, masses)?;
                table[c] = domain.clamp(loss.minimize_cell(&wv, domain)?);
            }
            DualFunction::new(class.clone(), Representation::Table(table), domain)
        }
        FunctionClass::Linear { features } => {
            linear_subgradient_erm(class, features, inputs, next_values, weights, loss, domain, opts)
        }
    }
}

/// Convex extension of ℓ outside the domain: ℓ(clamp z) + c₂·dist(z, domain).
fn extended_loss_and_slope(loss: &DualLoss, domain: DualDomain, c2: f64, z: f64, v: f64) -> Result<(f64, f64)> {
    let g = domain.clamp(z);
    let base = loss.value(g, v)?;
    if z < domain.lo {
        Ok((base + c2 * (domain.lo - z), -c2))
    } else if z > domain.hi {
        Ok((base + c2 * (z - domain.hi), c2))
    } else {
        Ok((base, loss.derivative(g, v).clamp(-c2, c2)))
    }
}

#[allow(clippy::too_many_arguments)]
fn linear_subgradient_erm(
    class: &FunctionClass,
    features: &FeatureMap,
    inputs: &[Input],
    next_values: &[f64],
    weights: Option<&[f64]>,
    loss: &DualLoss,
    domain: DualDomain,
    opts: &ErmOptions,
) -> Result<DualFunction> {
    if opts.iterations == 0 || opts.restarts == 0 {
        return Err(RrlError::InvalidParameter("ERM needs at least one iteration and restart".into()));
    }
    let d = features.dim;
    let n = inputs.len();
    let w: Vec<f64> = (0..n).map(|i| weights.map_or(1.0, |w| w[i])).collect();
    let total_w: f64 = w.iter().sum();
    let xs: Vec<&[f64]> = inputs.iter().map(|&(h, s, a)| features.features(h, s, a)).collect();
    let v_max = next_values.iter().copied().fold(0.0, f64::max);
    let (c2, c3) = loss.lipschitz_and_radius(v_max)?;
    let radius = c3.max(domain.lo.abs()).max(domain.hi.abs()).max(1e-12);

    // Jacobi preconditioner: per-coordinate second moment of the features
    let mut diag = vec![0.0; d];
    for (x, wi) in xs.iter().zip(&w) {
        for j in 0..d {
            diag[j] += wi * x[j] * x[j] / total_w;
        }
    }
    let scale: Vec<f64> = diag.iter().map(|m| if *m > 1e-12 { 1.0 / m } else { 0.0 }).collect();

    let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut value = 0.0;
        let mut grad = vec![0.0; d];
        for ((x, wi), &v) in xs.iter().zip(&w).zip(next_values) {
            let z: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
            let (l, slope) = extended_loss_and_slope(loss, domain, c2, z, v)?;
            value += wi * l;
            for j in 0..d {
                grad[j] += wi * slope * x[j];
            }
        }
        grad.iter_mut().for_each(|g| *g /= total_w);
        Ok((value / total_w, grad))
    };

    let mut rng = rng::stream(opts.seed, rng::STREAM_SUBGRADIENT);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..opts.restarts {
        let mut theta: Vec<f64> = if restart == 0 {
            vec![0.0; d]
        } else {
            (0..d)
                .map(|j| if scale[j] > 0.0 { rng.gen_range(-radius..=radius) / features.max_norm.max(1e-12) } else { 0.0 })
                .collect()
        };
        let tail_start = opts.iterations / 2;
        let mut tail_sum = vec![0.0; d];
        let mut restart_best: (f64, Vec<f64>) = (f64::INFINITY, theta.clone());
        for t in 1..=opts.iterations {
            let (value, grad) = objective(&theta)?;
            if value < restart_best.0 {
                restart_best = (value, theta.clone());
            }
            let step = c3 / (t as f64).sqrt();
            for j in 0..d {
                theta[j] -= step * scale[j] * grad[j];
            }
            if t > tail_start {
                for j in 0..d {
                    tail_sum[j] += theta[j];
                }
            }
        }
        let count = (opts.iterations - tail_start) as f64;
        let averaged: Vec<f64> = tail_sum.iter().map(|x| x / count).collect();
        for candidate in [averaged, theta] {
            let (value, _) = objective(&candidate)?;
            if value < restart_best.0 {
                restart_best = (value, candidate);
            }
        }
        if best.as_ref().is_none_or(|b| restart_best.0 < b.0) {
            best = Some(restart_best);
        }
    }
    let (_, theta) = best.expect("at least one restart");
    DualFunction::new(class.clone(), Representation::Weights(theta), domain)
}
