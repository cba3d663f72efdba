//! Stationary equilibria: cutoffs, masses and Bayes-consistent beliefs.

pub mod four_state;
mod solver;
mod types;
mod updates;

pub use four_state::{four_state_model, solve_four_state_closed_form};
pub use solver::{mass_upper_bound, solve_equilibrium, SolverOptions};
pub use types::{Beliefs, CutoffProfile, EquilibriumSolution, MassDistribution};
pub use updates::{
    beliefs_from_masses, bellman_cutoff_update, continuation_derivative, continuation_value, expected_continuation,
    flow_revenue, stationary_mass_update,
};

pub(crate) use updates::{beliefs_with_off_path, revenue, revenue_derivative};
