//! Robust φ-regularized reinforcement learning on tabular and linear
//! function classes.
//!
//! The crate is organised bottom-up:
//!
//! - [`divergence`]: φ generators, Fenchel conjugates, dual domains and the
//!   loss constants for TV, χ², KL and CVaR.
//! - [`dual`]: the scalar convex inner problem of the dual robust Bellman
//!   operator (golden-section search plus exact piecewise and closed forms).
//! - [`mdp`]: explicit nominal models, policies, occupancy measures and
//!   seeded dataset sampling.
//! - [`oracle`]: brute-force primal inner problem, robust value iteration,
//!   robust dynamic programming and robust policy evaluation.
//! - [`function_class`]: tabular and linear Q / dual-variable classes with
//!   least-squares and empirical-risk fitting.
//! - [`rpq`]: offline robust φ-regularized fitted Q-iteration.
//! - [`hytq`]: hybrid (offline + on-policy) robust TV-regularized
//!   Q-iteration over a finite horizon.
//! - [`diagnostics`]: coverage measurements (density ratios, transfer
//!   coefficient estimates).

pub mod diagnostics;
pub mod divergence;
pub mod dual;
pub mod error;
pub mod function_class;
pub mod hytq;
pub mod mdp;
pub mod oracle;
pub mod rng;
pub mod rpq;

pub use divergence::{DivergenceConstants, DualDomain, ExtendedReal, PhiDivergence};
pub use dual::{InnerSolution, WeightedValues};
pub use error::{Result, RrlError};
pub use mdp::{FiniteHorizonMdp, Policy, TabularMdp, TransitionDataset, TransitionRecord};
pub use oracle::{QTable, RobustSolution};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
