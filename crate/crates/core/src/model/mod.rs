//! State space, types, kernels, cost shocks and the maintained assumptions.

pub mod cost;
pub mod kernel;
pub mod params;
pub mod space;

pub use cost::CostDistribution;
pub use kernel::{
    build_product_kernel, build_sales_kernel, build_tauchen_rating_kernel, validate_assumption_a1, AssumptionReport,
    TransitionKernel,
};
pub use params::{default_weekly_beta, ModelParams, PayoffVariant, PriceNoise, QualityType};
pub use space::{RatingGrid, SalesGrid, StateSpace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-type measure of entrants over the state space (`η_θ`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeasure {
    pub by_type: [Vec<f64>; 2],
}

impl EntryMeasure {
    /// Point mass at ω₀ with total `entry_mass`, split `(1 − α, α)`.
    pub fn point_mass(params: &ModelParams, space: &StateSpace) -> Self {
        let n = space.len();
        let mut low = vec![0.0; n];
        let mut high = vec![0.0; n];
        low[space.entry_state()] = params.entry_mass * params.entry_share(QualityType::Low);
        high[space.entry_state()] = params.entry_mass * params.entry_share(QualityType::High);
        EntryMeasure { by_type: [low, high] }
    }

    /// General measure (research use); entries must be non-negative with positive total.
    pub fn general(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() {
            return Err(Error::DimensionMismatch("entry measures differ in length".into()));
        }
        if low.iter().chain(&high).any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::param("entry", "entry measure must be finite and non-negative"));
        }
        if low.iter().chain(&high).sum::<f64>() <= 0.0 {
            return Err(Error::param("entry", "entry measure has zero total mass"));
        }
        Ok(EntryMeasure { by_type: [low, high] })
    }

    pub fn get(&self, ty: QualityType) -> &[f64] {
        &self.by_type[ty.index()]
    }

    pub fn len(&self) -> usize {
        self.by_type[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entry mass multiplied by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let s = |v: &Vec<f64>| v.iter().map(|x| x * lambda).collect();
        EntryMeasure { by_type: [s(&self.by_type[0]), s(&self.by_type[1])] }
    }

    /// Probability that a type-`ty` entrant starts in `state`.
    pub fn initial_prob(&self, ty: QualityType, state: usize) -> f64 {
        let v = self.get(ty);
        let total: f64 = v.iter().sum();
        if total > 0.0 {
            v[state] / total
        } else {
            0.0
        }
    }

    /// High-type share of all entrants.
    pub fn high_share(&self) -> f64 {
        let lo: f64 = self.by_type[0].iter().sum();
        let hi: f64 = self.by_type[1].iter().sum();
        hi / (lo + hi)
    }
}

/// Everything needed to pose the equilibrium problem.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    pub space: StateSpace,
    pub kernel: TransitionKernel,
    pub cost: CostDistribution,
    pub entry: EntryMeasure,
}

impl Model {
    /// Assembles a model from its parts, checking dimensions.
    pub fn new(
        params: ModelParams,
        space: StateSpace,
        kernel: TransitionKernel,
        cost: CostDistribution,
        entry: EntryMeasure,
    ) -> Result<Self> {
        params.validate()?;
        if kernel.n_states() != space.len() || entry.len() != space.len() {
            return Err(Error::DimensionMismatch(format!(
                "state space has {} states, kernel {}, entry measure {}",
                space.len(),
                kernel.n_states(),
                entry.len()
            )));
        }
        Ok(Model { params, space, kernel, cost, entry })
    }

    /// The estimated specification: Tauchen ⊗ ladder kernels, point-mass entry at ω₀.
    pub fn from_params(params: ModelParams, space: StateSpace, cost: CostDistribution) -> Result<Self> {
        params.validate()?;
        let kernel = TransitionKernel::from_params(&params, &space)?;
        let entry = EntryMeasure::point_mass(&params, &space);
        Self::new(params, space, kernel, cost, entry)
    }

    /// Estimated specification with normal costs `N(μ_c, σ_c)`.
    pub fn normal(params: ModelParams, space: StateSpace) -> Result<Self> {
        let cost = params.normal_cost()?;
        Self::from_params(params, space, cost)
    }

    pub fn n_states(&self) -> usize {
        self.space.len()
    }

    /// Copy with a different discount factor.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut m = self.clone();
        m.params.beta = beta;
        m.params.validate()?;
        Ok(m)
    }

    /// Copy with the entry measure (and `entry_mass`) scaled by `lambda`.
    pub fn with_entry_scaled(&self, lambda: f64) -> Self {
        let mut m = self.clone();
        m.params.entry_mass *= lambda;
        m.entry = self.entry.scaled(lambda);
        m
    }
}

/// Default probe range for A2: `[θ̲ − 5σ_c, θ̄/(1 − β)]`, moved inside the
/// support of a bounded cost law.
pub fn default_a2_probe(cost: &CostDistribution, params: &ModelParams, points: usize) -> Vec<f64> {
    let mut lo = params.theta_low - 5.0 * cost.sd();
    let support = cost.support_min();
    if lo <= support {
        lo = support + 1e-3;
    }
    let hi = (params.theta_high / (1.0 - params.beta)).max(lo + 1e-3);
    let n = points.max(2);
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// A2: `0 < F(θ̲) < F(θ̄) < 1` and `d/dc [F(c)(c − E[c̃ | c̃ ≤ c])] > 0` on the probe grid
/// (central differences, step 1e−5).
pub fn validate_assumption_a2(cost: &CostDistribution, params: &ModelParams, probe: Option<&[f64]>) -> AssumptionReport {
    let fl = cost.cdf(params.theta_low);
    let fh = cost.cdf(params.theta_high);
    if !(0.0 < fl && fl < fh && fh < 1.0) {
        return AssumptionReport {
            holds: false,
            detail: format!("need 0 < F(θ̲) < F(θ̄) < 1, got F(θ̲) = {fl}, F(θ̄) = {fh}"),
            witness: Some(serde_json::json!({ "F_theta_low": fl, "F_theta_high": fh })),
        };
    }
    let owned;
    let grid = match probe {
        Some(g) => g,
        None => {
            owned = default_a2_probe(cost, params, 1000);
            &owned
        }
    };
    let h = 1e-5;
    for &c in grid {
        let d = (cost.partial_expectation(c + h) - cost.partial_expectation(c - h)) / (2.0 * h);
        if !(d > 0.0) {
            return AssumptionReport {
                holds: false,
                detail: format!("technical condition fails at c = {c}: derivative {d}"),
                witness: Some(serde_json::json!({ "c": c, "derivative": d })),
            };
        }
    }
    AssumptionReport {
        holds: true,
        detail: format!("technical condition holds on {} probe points", grid.len()),
        witness: None,
    }
}
