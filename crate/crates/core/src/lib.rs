//! Dynamic adverse-selection model of seller reputation.
//!
//! Sellers of privately known quality move through a public state of
//! (rating, sales bucket); buyers pay the posterior mean quality of the state;
//! sellers exit when a weekly cost shock exceeds a state- and type-specific
//! cutoff. The crate computes stationary equilibria, certifies their
//! uniqueness numerically, simulates weekly vendor panels, estimates the
//! structural parameters by nested-fixed-point maximum likelihood, and runs
//! counterfactuals.

pub mod analysis;
pub mod equilibrium;
pub mod error;
pub mod estimation;
mod linalg;
pub mod model;
pub mod numfmt;
pub mod simulator;
pub mod uniqueness;

pub use error::{Error, Result};
