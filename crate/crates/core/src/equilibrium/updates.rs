//! The individual equilibrium maps: flow revenue, expected continuation,
//! one Bellman sweep, one mass sweep and the Bayes update.

use super::types::{Beliefs, CutoffProfile, MassDistribution};
use crate::error::{Error, Result};
use crate::model::{CostDistribution, EntryMeasure, ModelParams, PayoffVariant, QualityType, TransitionKernel};

/// Flow revenue `θ̂(ω)·(γ₀ + γ₁·θ̂(ω))`.
pub fn flow_revenue(beliefs: &Beliefs, params: &ModelParams, state: usize) -> f64 {
    revenue(beliefs.theta_hat[state], params)
}

pub(crate) fn revenue(theta_hat: f64, params: &ModelParams) -> f64 {
    theta_hat * (params.demand_gamma0 + params.demand_gamma1 * theta_hat)
}

/// Derivative of the flow revenue in the belief.
pub(crate) fn revenue_derivative(theta_hat: f64, params: &ModelParams) -> f64 {
    params.demand_gamma0 + 2.0 * params.demand_gamma1 * theta_hat
}

/// Expected value of entering a period with cutoff `c̄`.
pub fn continuation_value(c: f64, cost: &CostDistribution, variant: PayoffVariant) -> f64 {
    match variant {
        PayoffVariant::MainText => cost.mean_shortfall(c),
        PayoffVariant::SurvivalWeighted => cost.partial_expectation(c),
    }
}

/// Derivative of [`continuation_value`] with respect to the cutoff.
pub fn continuation_derivative(c: f64, cost: &CostDistribution, variant: PayoffVariant) -> f64 {
    match variant {
        PayoffVariant::MainText => cost.mean_shortfall_derivative(c),
        PayoffVariant::SurvivalWeighted => cost.cdf(c),
    }
}

/// Per-state expected value `E[V](ω)` given next-period cutoffs.
pub fn expected_continuation(cutoffs_next: &[f64], cost: &CostDistribution, variant: PayoffVariant) -> Vec<f64> {
    cutoffs_next.iter().map(|&c| continuation_value(c, cost, variant)).collect()
}

/// One synchronous sweep `c̄′_θ(ω) = flow(ω) + β·Σ_ω′ Π_θ(ω, ω′)·E[V_θ](ω′)`.
pub fn bellman_cutoff_update(
    beliefs: &Beliefs,
    cutoffs: &CutoffProfile,
    kernel: &TransitionKernel,
    cost: &CostDistribution,
    params: &ModelParams,
) -> CutoffProfile {
    let n = kernel.n_states();
    let by_type = QualityType::ALL.map(|ty| {
        let ev = expected_continuation(cutoffs.get(ty), cost, params.payoff_variant);
        (0..n)
            .map(|i| {
                let cont: f64 = kernel.row(ty, i).iter().map(|&(j, p)| p * ev[j]).sum();
                flow_revenue(beliefs, params, i) + params.beta * cont
            })
            .collect()
    });
    CutoffProfile { by_type }
}

/// One synchronous sweep `μ′_θ(ω′) = Σ_ω Π_θ(ω, ω′)·F(c̄_θ(ω))·μ_θ(ω) + η_θ(ω′)`.
pub fn stationary_mass_update(
    masses: &MassDistribution,
    cutoffs: &CutoffProfile,
    kernel: &TransitionKernel,
    cost: &CostDistribution,
    entry: &EntryMeasure,
) -> MassDistribution {
    let n = kernel.n_states();
    let by_type = QualityType::ALL.map(|ty| {
        let mut next = entry.get(ty).to_vec();
        let mu = masses.get(ty);
        let c = cutoffs.get(ty);
        for i in 0..n {
            let out = cost.cdf(c[i]) * mu[i];
            if out != 0.0 {
                for &(j, p) in kernel.row(ty, i) {
                    next[j] += p * out;
                }
            }
        }
        debug_assert_eq!(next.len(), n);
        next
    });
    MassDistribution { by_type }
}

/// Bayes-consistent beliefs `θ̲ + (θ̄ − θ̲)·μ_high/(μ_low + μ_high)`.
///
/// Errors on the first state with zero total mass.
pub fn beliefs_from_masses(masses: &MassDistribution, params: &ModelParams) -> Result<Beliefs> {
    let (b, off) = beliefs_with_off_path(masses, params);
    match off.first() {
        Some(&state) => Err(Error::UndefinedBelief { state }),
        None => Ok(b),
    }
}

/// Bayes update that assigns the lowest quality to states no seller reaches
/// (total mass zero or subnormal).
pub(crate) fn beliefs_with_off_path(masses: &MassDistribution, params: &ModelParams) -> (Beliefs, Vec<usize>) {
    let spread = params.theta_high - params.theta_low;
    let mut off = Vec::new();
    let theta_hat = masses.by_type[0]
        .iter()
        .zip(&masses.by_type[1])
        .enumerate()
        .map(|(i, (&lo, &hi))| {
            let total = lo + hi;
            // Subnormal totals carry no usable information (their reciprocal
            // overflows); such states are treated as unreached.
            if total >= f64::MIN_POSITIVE {
                (params.theta_low + spread * (hi / total)).clamp(params.theta_low, params.theta_high)
            } else {
                off.push(i);
                params.theta_low
            }
        })
        .collect();
    (Beliefs { theta_hat }, off)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn single_state_kernel() -> TransitionKernel {
        TransitionKernel::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn flow_revenue_examples() {
        let b = Beliefs { theta_hat: vec![0.5, 0.0] };
        let p = ModelParams::default();
        assert_eq!(flow_revenue(&b, &p, 0), 0.5);
        let p2 = ModelParams { demand_gamma0: 0.2, demand_gamma1: 2.0, ..p };
        assert!((flow_revenue(&b, &p2, 0) - 0.6).abs() < 1e-15);
        assert_eq!(flow_revenue(&b, &p2, 1), 0.0);
    }

    #[test]
    fn expected_continuation_examples() {
        let u = CostDistribution::Uniform01;
        assert!((expected_continuation(&[0.8], &u, PayoffVariant::MainText)[0] - 0.4).abs() < 1e-15);
        assert!((expected_continuation(&[0.8], &u, PayoffVariant::SurvivalWeighted)[0] - 0.32).abs() < 1e-15);
        let n = CostDistribution::normal(0.386, 1.0).unwrap();
        let v = expected_continuation(&[0.386], &n, PayoffVariant::MainText)[0];
        assert!((v - 0.797_884_560_802_865_4).abs() < 1e-14);
    }

    #[test]
    fn myopic_bellman_sweep_returns_flow() {
        let p = ModelParams { beta: 0.0, ..ModelParams::default() };
        let k = single_state_kernel();
        let b = Beliefs { theta_hat: vec![0.41] };
        let c = CutoffProfile { by_type: [vec![3.0], vec![7.0]] };
        let out = bellman_cutoff_update(&b, &c, &k, &p.normal_cost().unwrap(), &p);
        assert_eq!(out.by_type, [vec![0.41], vec![0.41]]);
    }

    #[test]
    fn mass_sweep_examples() {
        let k = single_state_kernel();
        let entry = EntryMeasure::general(vec![1.0], vec![1.0]).unwrap();
        let u = CostDistribution::Uniform01;
        // survival ≡ 0 → μ′ = η
        let c = CutoffProfile { by_type: [vec![-1.0], vec![-1.0]] };
        let m = MassDistribution { by_type: [vec![5.0], vec![3.0]] };
        assert_eq!(stationary_mass_update(&m, &c, &k, &u, &entry), MassDistribution { by_type: [vec![1.0], vec![1.0]] });
        // F = 0.5 → fixed point 2
        let c = CutoffProfile { by_type: [vec![0.5], vec![0.5]] };
        let m = MassDistribution { by_type: [vec![2.0], vec![2.0]] };
        assert_eq!(stationary_mass_update(&m, &c, &k, &u, &entry), m);
    }

    #[test]
    fn mass_sweeps_grow_without_exit() {
        let pi = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let k = TransitionKernel::new(pi.clone(), pi).unwrap();
        let entry = EntryMeasure::general(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let c = CutoffProfile { by_type: [vec![2.0, 2.0], vec![2.0, 2.0]] };
        let mut m = MassDistribution::zeros(2);
        for _ in 0..100 {
            m = stationary_mass_update(&m, &c, &k, &CostDistribution::Uniform01, &entry);
        }
        assert!((m.by_type[0][0] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn belief_examples() {
        let p = ModelParams::default();
        let b = beliefs_from_masses(&MassDistribution { by_type: [vec![2.0], vec![2.0]] }, &p).unwrap();
        assert!((b.theta_hat[0] - 0.4125).abs() < 1e-15);
        let b = beliefs_from_masses(&MassDistribution { by_type: [vec![0.767], vec![0.233]] }, &p).unwrap();
        assert!((b.theta_hat[0] - 0.352_425).abs() < 1e-15);
        let b = beliefs_from_masses(&MassDistribution { by_type: [vec![0.0], vec![1.0]] }, &p).unwrap();
        assert_eq!(b.theta_hat[0], 0.525);
        let err = beliefs_from_masses(&MassDistribution { by_type: [vec![1.0, 0.0], vec![1.0, 0.0]] }, &p);
        assert!(matches!(err, Err(Error::UndefinedBelief { state: 1 })));
    }
}
