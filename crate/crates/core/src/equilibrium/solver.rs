//! Stationary-equilibrium solver.
//!
//! The outer loop iterates on beliefs with damping. For given beliefs the
//! cutoff system `c = flow + β·Π·EV(c)` is solved exactly by Newton's method,
//! and for given cutoffs the stationary masses solve the linear system
//! `(I − diag(F)·Π)ᵀ μ = η` exactly. Both inner problems are decomposed along
//! the strongly connected components of the kernel (sales only move up, so
//! the estimated model splits into one block per sales bucket) and each block
//! is solved densely.
//!
//! The mass blocks are eliminated without subtractions (Grassmann–Taksar–Heyman
//! style): each pivot is assembled from the exact exit probability plus the
//! off-diagonal outflow, so masses remain relatively accurate even when exit
//! probabilities are many orders of magnitude below machine epsilon, as they
//! are for high types at the top rating.

use nalgebra::{DMatrix, DVector};

use super::types::{Beliefs, CutoffProfile, EquilibriumSolution, MassDistribution};
use super::updates::{
    beliefs_with_off_path, bellman_cutoff_update, continuation_derivative, continuation_value, revenue,
    stationary_mass_update,
};
use crate::error::{Error, Result};
use crate::linalg::GthLu;
use crate::model::{validate_assumption_a1, validate_assumption_a2, Model, QualityType};

/// Options for [`solve_equilibrium`].
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Sup-norm tolerance on all three residuals.
    pub tol: f64,
    /// Maximum number of outer (belief) iterations.
    pub max_iter: usize,
    /// Weight on the new beliefs in each outer step.
    pub damping: f64,
    /// Start from an earlier solution (beliefs and cutoffs).
    pub warm_start: Option<EquilibriumSolution>,
    /// Fail up front if A1 or A2 does not hold.
    pub enforce_assumptions: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iter: 10_000, damping: 0.5, warm_start: None, enforce_assumptions: false }
    }
}

const NEWTON_MAX_STEPS: usize = 200;
const UNSET: usize = usize::MAX;

/// Solves for cutoffs, masses and beliefs that are mutually consistent.
pub fn solve_equilibrium(model: &Model, options: &SolverOptions) -> Result<EquilibriumSolution> {
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return Err(Error::param("damping", format!("must lie in (0, 1], got {}", options.damping)));
    }
    if options.enforce_assumptions {
        let a1 = validate_assumption_a1(&model.kernel);
        if !a1.holds {
            return Err(Error::AssumptionViolated { assumption: "A1", detail: a1.detail });
        }
        let a2 = validate_assumption_a2(&model.cost, &model.params, None);
        if !a2.holds {
            return Err(Error::AssumptionViolated { assumption: "A2", detail: a2.detail });
        }
    }
    let n = model.n_states();
    let p = &model.params;
    let (mut beliefs, mut cutoffs) = match &options.warm_start {
        Some(ws) if ws.n_states() == n => (ws.beliefs.clone(), ws.cutoffs.by_type.clone()),
        _ => {
            let pooled = p.theta_low + (p.theta_high - p.theta_low) * model.entry.high_share();
            let b = Beliefs::constant(pooled, n);
            let c0: Vec<f64> = b.theta_hat.iter().map(|&t| revenue(t, p)).collect();
            (b, [c0.clone(), c0])
        }
    };

    let mut trace = Vec::new();
    let inner_tol = options.tol * 1e-2;
    for iteration in 1..=options.max_iter {
        cutoffs = solve_cutoffs(model, &beliefs, &cutoffs)?;
        let masses = solve_masses(model, &cutoffs)?;
        let (target, _) = beliefs_with_off_path(&masses, p);
        let step = sup_diff(&target.theta_hat, &beliefs.theta_hat);
        trace.push(step);
        if step <= inner_tol {
            // Certify at the Bayes-consistent beliefs.
            beliefs = target;
            cutoffs = solve_cutoffs(model, &beliefs, &cutoffs)?;
            let masses = solve_masses(model, &cutoffs)?;
            let sol = certify(model, beliefs.clone(), cutoffs.clone(), masses, iteration, options.tol)?;
            if sol.is_converged() {
                return Ok(sol);
            }
            continue;
        }
        let d = options.damping;
        for (b, t) in beliefs.theta_hat.iter_mut().zip(&target.theta_hat) {
            *b = (1.0 - d) * *b + d * t;
        }
    }
    Err(Error::NonConvergence {
        iterations: options.max_iter,
        last_residual: trace.last().copied().unwrap_or(f64::NAN),
        trace,
    })
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Builds the solution record and measures the residual of one more sweep of each map.
fn certify(
    model: &Model,
    beliefs: Beliefs,
    cutoffs: [Vec<f64>; 2],
    masses: MassDistribution,
    iterations: usize,
    tol: f64,
) -> Result<EquilibriumSolution> {
    let p = &model.params;
    let cutoffs = CutoffProfile { by_type: cutoffs };
    let next_c = bellman_cutoff_update(&beliefs, &cutoffs, &model.kernel, &model.cost, p);
    let residual_cutoff = (0..2).map(|t| sup_diff(&next_c.by_type[t], &cutoffs.by_type[t])).fold(0.0, f64::max);
    let next_m = stationary_mass_update(&masses, &cutoffs, &model.kernel, &model.cost, &model.entry);
    let residual_mass = (0..2)
        .flat_map(|t| {
            masses.by_type[t].iter().zip(&next_m.by_type[t]).map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        })
        .fold(0.0, f64::max);
    let (next_b, off_path_states) = beliefs_with_off_path(&masses, p);
    let residual_belief = sup_diff(&next_b.theta_hat, &beliefs.theta_hat);
    let survival = QualityType::ALL.map(|ty| cutoffs.get(ty).iter().map(|&c| model.cost.cdf(c)).collect());
    let exit_prob = QualityType::ALL.map(|ty| cutoffs.get(ty).iter().map(|&c| model.cost.sf(c)).collect());
    check_mass_bound(model, &cutoffs, &masses)?;
    Ok(EquilibriumSolution {
        beliefs,
        cutoffs,
        masses,
        survival,
        exit_prob,
        residual_cutoff,
        residual_mass,
        residual_belief,
        iterations,
        tolerance: tol,
        payoff_variant: p.payoff_variant,
        off_path_states,
    })
}

/// Upper mass bound `|Θ|·|Ω|·max η / (1 − F(c_max))`.
pub fn mass_upper_bound(model: &Model, cutoffs: &CutoffProfile) -> f64 {
    let c_max = cutoffs.by_type.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let eta_max = model.entry.by_type.iter().flatten().copied().fold(0.0, f64::max);
    2.0 * model.n_states() as f64 * eta_max / model.cost.sf(c_max)
}

fn check_mass_bound(model: &Model, cutoffs: &CutoffProfile, masses: &MassDistribution) -> Result<()> {
    let bound = mass_upper_bound(model, cutoffs);
    let worst = masses.by_type.iter().flatten().copied().fold(0.0, f64::max);
    if worst > bound * (1.0 + 1e-9) {
        return Err(Error::NonContraction(format!("mass {worst:e} exceeds the stationary bound {bound:e}")));
    }
    Ok(())
}

/// Exact cutoffs for fixed beliefs (Newton per type, block back-substitution).
pub(crate) fn solve_cutoffs(model: &Model, beliefs: &Beliefs, init: &[Vec<f64>; 2]) -> Result<[Vec<f64>; 2]> {
    let flow: Vec<f64> = beliefs.theta_hat.iter().map(|&t| revenue(t, &model.params)).collect();
    let low = newton_cutoffs(model, QualityType::Low, &flow, &init[0])?;
    let high = newton_cutoffs(model, QualityType::High, &flow, &init[1])?;
    Ok([low, high])
}

fn bellman_residual(model: &Model, ty: QualityType, flow: &[f64], c: &[f64]) -> (Vec<f64>, f64) {
    let p = &model.params;
    let ev: Vec<f64> = c.iter().map(|&x| continuation_value(x, &model.cost, p.payoff_variant)).collect();
    let g: Vec<f64> = (0..c.len())
        .map(|i| {
            let cont: f64 = model.kernel.row(ty, i).iter().map(|&(j, q)| q * ev[j]).sum();
            c[i] - flow[i] - p.beta * cont
        })
        .collect();
    let norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (g, norm)
}

fn newton_cutoffs(model: &Model, ty: QualityType, flow: &[f64], init: &[f64]) -> Result<Vec<f64>> {
    let p = &model.params;
    let mut c = init.to_vec();
    let (mut g, mut norm) = bellman_residual(model, ty, flow, &c);
    for _ in 0..NEWTON_MAX_STEPS {
        let scale = c.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if norm <= 1e-14 * scale {
            return Ok(c);
        }
        if !norm.is_finite() {
            break;
        }
        let d: Vec<f64> = c.iter().map(|&x| continuation_derivative(x, &model.cost, p.payoff_variant)).collect();
        let delta = newton_direction(model, ty, &d, &g)?;
        let mut step = 1.0;
        loop {
            let trial: Vec<f64> = c.iter().zip(&delta).map(|(x, dx)| x - step * dx).collect();
            let (g_try, norm_try) = bellman_residual(model, ty, flow, &trial);
            if norm_try < norm {
                c = trial;
                g = g_try;
                norm = norm_try;
                break;
            }
            step *= 0.5;
            if step < 1e-10 {
                // No further progress is possible in floating point.
                return if norm <= 1e-11 * scale {
                    Ok(c)
                } else {
                    Err(Error::NonConvergence { iterations: 0, last_residual: norm, trace: vec![norm] })
                };
            }
        }
    }
    Err(Error::NonConvergence { iterations: NEWTON_MAX_STEPS, last_residual: norm, trace: vec![norm] })
}

/// Solves `(I − β·Π·diag(d))·Δ = g` block by block, downstream blocks first.
fn newton_direction(model: &Model, ty: QualityType, d: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let n = g.len();
    let beta = model.params.beta;
    let mut delta = vec![0.0; n];
    let mut pos = vec![UNSET; n];
    for block in model.kernel.blocks().iter().rev() {
        for (a, &s) in block.iter().enumerate() {
            pos[s] = a;
        }
        let m = block.len();
        let mut mat = DMatrix::<f64>::identity(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for (a, &i) in block.iter().enumerate() {
            let mut r = g[i];
            for &(j, q) in model.kernel.row(ty, i) {
                let w = beta * q * d[j];
                if pos[j] != UNSET {
                    mat[(a, pos[j])] -= w;
                } else {
                    r += w * delta[j];
                }
            }
            rhs[a] = r;
        }
        let x = if m == 1 {
            DVector::from_element(1, rhs[0] / mat[(0, 0)])
        } else {
            mat.lu().solve(&rhs).ok_or_else(|| Error::Infeasible("singular Newton block".into()))?
        };
        for (a, &s) in block.iter().enumerate() {
            delta[s] = x[a];
            pos[s] = UNSET;
        }
    }
    Ok(delta)
}

/// Exact stationary masses for fixed cutoffs.
pub(crate) fn solve_masses(model: &Model, cutoffs: &[Vec<f64>; 2]) -> Result<MassDistribution> {
    let low = gth_masses(model, QualityType::Low, &cutoffs[0])?;
    let high = gth_masses(model, QualityType::High, &cutoffs[1])?;
    Ok(MassDistribution { by_type: [low, high] })
}

fn gth_masses(model: &Model, ty: QualityType, c: &[f64]) -> Result<Vec<f64>> {
    let n = c.len();
    let kernel = &model.kernel;
    let surv: Vec<f64> = c.iter().map(|&x| model.cost.cdf(x)).collect();
    let exit: Vec<f64> = c.iter().map(|&x| model.cost.sf(x)).collect();
    let mut inflow = model.entry.get(ty).to_vec();
    let mut mu = vec![0.0; n];
    let mut pos = vec![UNSET; n];
    for (b, block) in kernel.blocks().iter().enumerate() {
        let m = block.len();
        for (a, &s) in block.iter().enumerate() {
            pos[s] = a;
        }
        // Row-major dense block of A = I − diag(F)Π restricted to the block (off-diagonal part).
        let mut a = vec![0.0; m * m];
        let mut leak = vec![0.0; m];
        for (ai, &i) in block.iter().enumerate() {
            leak[ai] = exit[i];
            for &(j, q) in kernel.row(ty, i) {
                if j == i {
                    continue;
                }
                if pos[j] != UNSET {
                    a[ai * m + pos[j]] = -surv[i] * q;
                } else {
                    leak[ai] += surv[i] * q;
                }
            }
        }
        let lu = GthLu::factor(a, leak, m).map_err(|_| {
            Error::NonContraction(format!(
                "{} sellers never leave the closed class {:?}: zero exit probability",
                ty.label(),
                &block[..block.len().min(8)]
            ))
        })?;
        let mut x: Vec<f64> = block.iter().map(|&i| inflow[i]).collect();
        lu.solve_transpose(&mut x);
        for (k, &i) in block.iter().enumerate() {
            mu[i] = x[k];
        }
        for &i in block {
            pos[i] = UNSET;
        }
        for &i in block {
            let out = surv[i] * mu[i];
            if out == 0.0 {
                continue;
            }
            for &(j, q) in kernel.row(ty, i) {
                if kernel.block_of(j) != b {
                    inflow[j] += q * out;
                }
            }
        }
    }
    if let Some(i) = mu.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonContraction(format!("{} mass diverges at state {i}", ty.label())));
    }
    Ok(mu)
}
