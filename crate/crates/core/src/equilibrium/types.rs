use serde::{Deserialize, Serialize};

use crate::model::{PayoffVariant, QualityType};

/// Posterior mean quality `θ̂(ω)` per state; equals the price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beliefs {
    pub theta_hat: Vec<f64>,
}

impl Beliefs {
    pub fn constant(value: f64, n: usize) -> Self {
        Beliefs { theta_hat: vec![value; n] }
    }

    pub fn len(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta_hat.is_empty()
    }
}

/// Exit cutoffs `c̄_θ(ω)`: stay iff the period's cost is at most the cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffProfile {
    pub by_type: [Vec<f64>; 2],
}

impl CutoffProfile {
    pub fn get(&self, ty: QualityType) -> &[f64] {
        &self.by_type[ty.index()]
    }

    pub fn len(&self) -> usize {
        self.by_type[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stationary masses `μ_θ(ω)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassDistribution {
    pub by_type: [Vec<f64>; 2],
}

impl MassDistribution {
    pub fn get(&self, ty: QualityType) -> &[f64] {
        &self.by_type[ty.index()]
    }

    pub fn len(&self) -> usize {
        self.by_type[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(n: usize) -> Self {
        MassDistribution { by_type: [vec![0.0; n], vec![0.0; n]] }
    }
}

/// A stationary equilibrium together with its certification data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub beliefs: Beliefs,
    pub cutoffs: CutoffProfile,
    pub masses: MassDistribution,
    /// `F(c̄_θ(ω))`.
    pub survival: [Vec<f64>; 2],
    /// `1 − F(c̄_θ(ω))`, evaluated in the upper tail (meaningful below 1e−16).
    pub exit_prob: [Vec<f64>; 2],
    /// Sup-norm change of one Bellman sweep at the solution.
    pub residual_cutoff: f64,
    /// Sup-norm change of one mass sweep, relative to `max(1, μ)`.
    pub residual_mass: f64,
    /// Sup-norm change of the Bayes update at the solution.
    pub residual_belief: f64,
    /// Outer (belief) iterations performed.
    pub iterations: usize,
    pub tolerance: f64,
    pub payoff_variant: PayoffVariant,
    /// States that no seller reaches; their belief is set to `θ̲`.
    pub off_path_states: Vec<usize>,
}

impl EquilibriumSolution {
    pub fn n_states(&self) -> usize {
        self.beliefs.len()
    }

    /// Largest of the three residuals.
    pub fn max_residual(&self) -> f64 {
        self.residual_cutoff.max(self.residual_mass).max(self.residual_belief)
    }

    /// True when every residual is within the solver tolerance.
    pub fn is_converged(&self) -> bool {
        self.max_residual() <= self.tolerance
    }
}
