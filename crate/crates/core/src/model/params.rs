//! Structural parameters and the two seller types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Permanent seller quality label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityType {
    Low,
    High,
}

impl QualityType {
    pub const ALL: [QualityType; 2] = [QualityType::Low, QualityType::High];

    /// Position of the type in per-type arrays (`Low = 0`, `High = 1`).
    pub fn index(self) -> usize {
        match self {
            QualityType::Low => 0,
            QualityType::High => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            QualityType::Low => "low",
            QualityType::High => "high",
        }
    }
}

/// How the expected continuation value is formed from next-period cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffVariant {
    /// `c̄ − E[c̃ | c̃ ≤ c̄]`, the recursion as printed in the main text.
    MainText,
    /// `F(c̄)·(c̄ − E[c̃ | c̃ ≤ c̄]) = E[max(0, c̄ − c̃)]`, the exact Bellman expectation.
    #[default]
    SurvivalWeighted,
}

/// Observation noise on transaction prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceNoise {
    /// `p = θ̂·exp(ε)`, `ε ~ N(0, σ_p)`.
    #[default]
    Multiplicative,
    /// `p = θ̂ + exp(ε)`, `ε ~ N(0, σ_p)`; prices always exceed θ̂.
    AdditiveLognormal,
}

impl PriceNoise {
    /// Observed price for belief `θ̂` and a standard-normal draw `z`.
    pub fn observe(self, theta_hat: f64, sigma_p: f64, z: f64) -> f64 {
        match self {
            PriceNoise::Multiplicative => theta_hat * (sigma_p * z).exp(),
            PriceNoise::AdditiveLognormal => theta_hat + (sigma_p * z).exp(),
        }
    }

    /// Log density of an observed price given the belief `θ̂`.
    pub fn log_density(self, price: f64, theta_hat: f64, sigma_p: f64) -> f64 {
        let (x, jacobian) = match self {
            PriceNoise::Multiplicative => (price / theta_hat, theta_hat),
            PriceNoise::AdditiveLognormal => (price - theta_hat, 1.0),
        };
        if !(x > 0.0) || !(jacobian > 0.0) {
            return f64::NEG_INFINITY;
        }
        let z = x.ln() / sigma_p;
        -0.5 * z * z - x.ln() - sigma_p.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - jacobian.ln()
    }
}

/// Weekly discount factor implied by a 25% annual interest rate.
pub fn default_weekly_beta() -> f64 {
    (1.0f64 / 1.25).powf(1.0 / 52.0)
}

/// The structural parameters plus the fixed quantities of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub theta_low: f64,
    pub theta_high: f64,
    /// Share of high types among entrants.
    pub alpha: f64,
    pub mu_c: f64,
    pub sigma_c: f64,
    /// Probability of graduating to the next sales bucket in a week.
    pub gamma_sales: f64,
    pub rho_low: f64,
    pub rho_high: f64,
    /// Rating persistence.
    pub xi: f64,
    pub sigma_r: f64,
    pub sigma_p: f64,
    pub beta: f64,
    pub demand_gamma0: f64,
    pub demand_gamma1: f64,
    pub payoff_variant: PayoffVariant,
    pub price_noise: PriceNoise,
    pub entry_mass: f64,
}

impl Default for ModelParams {
    /// The point estimates of the structural model.
    fn default() -> Self {
        ModelParams {
            theta_low: 0.300,
            theta_high: 0.525,
            alpha: 0.233,
            mu_c: 0.386,
            sigma_c: 1.0,
            gamma_sales: 0.293,
            rho_low: 5.010,
            rho_high: 6.372,
            xi: 0.060,
            sigma_r: 0.037,
            sigma_p: 0.144,
            beta: default_weekly_beta(),
            demand_gamma0: 1.0,
            demand_gamma1: 0.0,
            payoff_variant: PayoffVariant::SurvivalWeighted,
            price_noise: PriceNoise::Multiplicative,
            entry_mass: 1.0,
        }
    }
}

fn open_unit(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must lie strictly inside (0, 1), got {v}")))
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be finite and > 0, got {v}")))
    }
}

impl ModelParams {
    /// Quality of a type.
    pub fn theta(&self, ty: QualityType) -> f64 {
        match ty {
            QualityType::Low => self.theta_low,
            QualityType::High => self.theta_high,
        }
    }

    /// Long-run rating target of a type.
    pub fn rho(&self, ty: QualityType) -> f64 {
        match ty {
            QualityType::Low => self.rho_low,
            QualityType::High => self.rho_high,
        }
    }

    /// Share of a type among entrants.
    pub fn entry_share(&self, ty: QualityType) -> f64 {
        match ty {
            QualityType::Low => 1.0 - self.alpha,
            QualityType::High => self.alpha,
        }
    }

    /// Checks every invariant of the parameter container.
    ///
    /// `theta_low == theta_high` is accepted (it is the no-adverse-selection
    /// limit used by several analyses); an inverted order is not.
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.theta_low,
            self.theta_high,
            self.alpha,
            self.mu_c,
            self.sigma_c,
            self.gamma_sales,
            self.rho_low,
            self.rho_high,
            self.xi,
            self.sigma_r,
            self.sigma_p,
            self.beta,
            self.demand_gamma0,
            self.demand_gamma1,
            self.entry_mass,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("params", "all parameters must be finite"));
        }
        if self.theta_low > self.theta_high {
            return Err(Error::param(
                "theta_low",
                format!("theta_low ({}) must not exceed theta_high ({})", self.theta_low, self.theta_high),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::param("alpha", format!("must lie in (0, 1], got {}", self.alpha)));
        }
        open_unit("gamma_sales", self.gamma_sales)?;
        open_unit("xi", self.xi)?;
        if !(self.beta >= 0.0 && self.beta < 1.0) {
            return Err(Error::param("beta", format!("must lie in [0, 1), got {}", self.beta)));
        }
        positive("sigma_c", self.sigma_c)?;
        positive("sigma_r", self.sigma_r)?;
        positive("sigma_p", self.sigma_p)?;
        positive("entry_mass", self.entry_mass)?;
        Ok(())
    }

    /// Normal cost law implied by `mu_c` and `sigma_c`.
    pub fn normal_cost(&self) -> Result<super::CostDistribution> {
        super::CostDistribution::normal(self.mu_c, self.sigma_c)
    }
}
