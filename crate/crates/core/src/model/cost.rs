//! Per-period operating-cost shocks.
//!
//! Besides the usual cdf/density, the solvers need three derived objects that
//! lose precision when computed naively in the tails:
//!
//! * the exit probability `1 − F(c)`, which for high-type sellers in good
//!   states is far below machine epsilon and must come from the upper tail
//!   directly;
//! * the partial expectation `E[max(0, c − c̃)] = F(c)(c − E[c̃ | c̃ ≤ c])`;
//! * the mean shortfall `c − E[c̃ | c̃ ≤ c]`.
//!
//! For the normal family the last two are evaluated through the continued
//! fraction of the Mills ratio once the standardized cutoff is far in the
//! lower tail.

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// Below this standardized value the continued-fraction forms are used.
const LOWER_TAIL_SWITCH: f64 = -3.0;
const CF_TERMS: usize = 400;

/// Cost-shock law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostDistribution {
    /// Uniform on [0, 1].
    Uniform01,
    /// Normal with the given mean and standard deviation.
    Normal { mean: f64, sd: f64 },
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal cdf, accurate in the lower tail.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal survival function, accurate in the upper tail.
pub fn std_normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Tail term `t(x) = 1/(x + 2/(x + 3/(x + …)))` for `x > 0`.
///
/// With `D(x) = x + t(x)` the reciprocal Mills ratio, `φ(x)/Φ(−x) = D(x)`.
fn mills_tail(x: f64) -> f64 {
    let mut acc = x;
    for k in (2..=CF_TERMS).rev() {
        acc = x + k as f64 / acc;
    }
    1.0 / acc
}

impl CostDistribution {
    /// Normal law, validating the scale.
    pub fn normal(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
            return Err(Error::param("sigma_c", format!("normal cost law needs finite mean and sd > 0, got ({mean}, {sd})")));
        }
        Ok(CostDistribution::Normal { mean, sd })
    }

    /// Cumulative distribution function `F(c)`.
    pub fn cdf(&self, c: f64) -> f64 {
        match *self {
            CostDistribution::Uniform01 => c.clamp(0.0, 1.0),
            CostDistribution::Normal { mean, sd } => std_normal_cdf((c - mean) / sd),
        }
    }

    /// Upper tail `1 − F(c)`, computed without cancellation.
    pub fn sf(&self, c: f64) -> f64 {
        match *self {
            CostDistribution::Uniform01 => (1.0 - c).clamp(0.0, 1.0),
            CostDistribution::Normal { mean, sd } => std_normal_sf((c - mean) / sd),
        }
    }

    /// Density `f(c)`.
    pub fn pdf(&self, c: f64) -> f64 {
        match *self {
            CostDistribution::Uniform01 => {
                if c > 0.0 && c < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            CostDistribution::Normal { mean, sd } => std_normal_pdf((c - mean) / sd) / sd,
        }
    }

    /// Standard deviation of the law.
    pub fn sd(&self) -> f64 {
        match *self {
            CostDistribution::Uniform01 => (1.0f64 / 12.0).sqrt(),
            CostDistribution::Normal { sd, .. } => sd,
        }
    }

    /// Lower end of the support (−∞ for the normal).
    pub fn support_min(&self) -> f64 {
        match *self {
            CostDistribution::Uniform01 => 0.0,
            CostDistribution::Normal { .. } => f64::NEG_INFINITY,
        }
    }

    /// Partial expectation `E[max(0, c − c̃)] = F(c)·(c − E[c̃ | c̃ ≤ c])`.
    pub fn partial_expectation(&self, c: f64) -> f64 {
        match *self {
            CostDistribution::Uniform01 => {
                if c <= 0.0 {
                    0.0
                } else if c <= 1.0 {
                    0.5 * c * c
                } else {
                    c - 0.5
                }
            }
            CostDistribution::Normal { mean, sd } => {
                let z = (c - mean) / sd;
                if z >= LOWER_TAIL_SWITCH {
                    sd * (z * std_normal_cdf(z) + std_normal_pdf(z))
                } else {
                    let x = -z;
                    let t = mills_tail(x);
                    sd * std_normal_pdf(x) * t / (x + t)
                }
            }
        }
    }

    /// Mean shortfall `c − E[c̃ | c̃ ≤ c]`; its limit (0) where `F(c) = 0`.
    pub fn mean_shortfall(&self, c: f64) -> f64 {
        match *self {
            CostDistribution::Uniform01 => {
                if c <= 0.0 {
                    0.0
                } else if c <= 1.0 {
                    0.5 * c
                } else {
                    c - 0.5
                }
            }
            CostDistribution::Normal { mean, sd } => {
                let z = (c - mean) / sd;
                if z >= LOWER_TAIL_SWITCH {
                    sd * (z + std_normal_pdf(z) / std_normal_cdf(z))
                } else {
                    sd * mills_tail(-z)
                }
            }
        }
    }

    /// Truncated mean `E[c̃ | c̃ ≤ c]` (equal to `c` where `F(c) = 0`).
    pub fn truncated_mean(&self, c: f64) -> f64 {
        c - self.mean_shortfall(c)
    }

    /// Derivative of [`mean_shortfall`](Self::mean_shortfall) with respect to `c`.
    pub fn mean_shortfall_derivative(&self, c: f64) -> f64 {
        match *self {
            CostDistribution::Uniform01 => {
                if c <= 0.0 {
                    0.0
                } else if c < 1.0 {
                    0.5
                } else {
                    1.0
                }
            }
            CostDistribution::Normal { mean, sd } => {
                let z = (c - mean) / sd;
                if z >= LOWER_TAIL_SWITCH {
                    let hazard = std_normal_pdf(z) / std_normal_cdf(z);
                    // d/dz [z + h(z)] with h' = −h(z + h)
                    1.0 - hazard * (z + hazard)
                } else {
                    let x = -z;
                    let t = mills_tail(x);
                    1.0 - t * (x + t)
                }
            }
        }
    }
}
