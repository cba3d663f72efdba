//! The two-rating, two-sales-level example with uniform costs and
//! qualities {0, 1}, together with an independent solver for it.
//!
//! States are indexed like any other model: `L1 = 0, L2 = 1, H1 = 2, H2 = 3`
//! (rating-major, sales level minor). Entrants arrive at `H1`. With
//! `γ₀ = γ`, `γ₁ = 1 − γ`, a type-`θ` seller in sales level 1 moves H→L with
//! probability `(1 − γ_{1−θ})/2` and L→H with probability `(1 − γ_θ)/2`; in
//! sales level 2 those rates halve. Level 1 graduates to level 2 with
//! probability `ρ` (keeping the rating), and level 2 is absorbing.
//!
//! The oracle below never touches the general solver: masses come from the
//! explicit elimination of the four stationarity equations per type, cutoffs
//! from a per-type semismooth Newton solve, and the equilibrium from a fixed
//! point in the four beliefs.
//!
//! With bounded costs a stationary equilibrium need not exist: when beliefs in
//! the absorbing level 2 are high enough, one type's cutoffs there exceed the
//! cost support, nobody of that type ever exits, and its mass is unbounded.
//! This happens for patient sellers (roughly β ≳ 0.5 once γ ≥ 0.75), and both
//! solvers then report failure.

use nalgebra::{DMatrix, DVector};

use super::types::{Beliefs, CutoffProfile, EquilibriumSolution, MassDistribution};
use crate::error::{Error, Result};
use crate::model::{
    CostDistribution, EntryMeasure, Model, ModelParams, PayoffVariant, RatingGrid, SalesGrid, StateSpace,
    TransitionKernel,
};

pub const L1: usize = 0;
pub const L2: usize = 1;
pub const H1: usize = 2;
pub const H2: usize = 3;
pub const STATE_LABELS: [&str; 4] = ["L1", "L2", "H1", "H2"];

/// Rating-flip probabilities `(H→L, L→H)` in sales level 1 for type index `t`.
fn flips(gamma: f64, t: usize) -> (f64, f64) {
    let g = [gamma, 1.0 - gamma];
    ((1.0 - g[1 - t]) / 2.0, (1.0 - g[t]) / 2.0)
}

fn check_inputs(gamma: f64, rho: f64, beta: f64, entry: [f64; 2]) -> Result<()> {
    if !(0.5..1.0).contains(&gamma) {
        return Err(Error::param("gamma", format!("must lie in [1/2, 1), got {gamma}")));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::param("rho", format!("must lie in (0, 1), got {rho}")));
    }
    if gamma / 2.0 + rho > 1.0 {
        return Err(Error::param("rho", "level-1 transition probabilities exceed one"));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::param("beta", format!("must lie in [0, 1), got {beta}")));
    }
    if !(entry[0] > 0.0 && entry[1] > 0.0) {
        return Err(Error::param("entry", "both entry masses must be positive"));
    }
    Ok(())
}

/// Kernel of type index `t` (0 = low, 1 = high).
pub fn four_state_kernel(gamma: f64, rho: f64, t: usize) -> DMatrix<f64> {
    let (hl, lh) = flips(gamma, t);
    let mut m = DMatrix::zeros(4, 4);
    m[(H1, L1)] = hl;
    m[(H1, H2)] = rho;
    m[(H1, H1)] = 1.0 - hl - rho;
    m[(L1, H1)] = lh;
    m[(L1, L2)] = rho;
    m[(L1, L1)] = 1.0 - lh - rho;
    m[(H2, L2)] = hl / 2.0;
    m[(H2, H2)] = 1.0 - hl / 2.0;
    m[(L2, H2)] = lh / 2.0;
    m[(L2, L2)] = 1.0 - lh / 2.0;
    m
}

/// The example as a general [`Model`] (main-text payoff, uniform costs).
pub fn four_state_model(gamma: f64, rho: f64, beta: f64, entry: [f64; 2]) -> Result<Model> {
    check_inputs(gamma, rho, beta, entry)?;
    let total = entry[0] + entry[1];
    let params = ModelParams {
        theta_low: 0.0,
        theta_high: 1.0,
        alpha: entry[1] / total,
        beta,
        demand_gamma0: 1.0,
        demand_gamma1: 0.0,
        payoff_variant: PayoffVariant::MainText,
        entry_mass: total,
        ..ModelParams::default()
    };
    let space = StateSpace::new(RatingGrid::new(vec![0.0, 1.0])?, SalesGrid::unit_buckets(2)?);
    debug_assert_eq!(space.entry_state(), H1);
    let kernel = TransitionKernel::new(four_state_kernel(gamma, rho, 0), four_state_kernel(gamma, rho, 1))?;
    let mut low = vec![0.0; 4];
    let mut high = vec![0.0; 4];
    low[H1] = entry[0];
    high[H1] = entry[1];
    let entry = EntryMeasure::general(low, high)?;
    Model::new(params, space, kernel, CostDistribution::Uniform01, entry)
}

fn surv(c: f64) -> f64 {
    c.clamp(0.0, 1.0)
}

/// `c − E[c̃ | c̃ ≤ c]` for uniform costs: `c/2` on [0, 1], `c − 1/2` above.
fn shortfall(c: f64) -> f64 {
    if c <= 0.0 {
        0.0
    } else if c <= 1.0 {
        c / 2.0
    } else {
        c - 0.5
    }
}

/// Stationary masses `[L1, L2, H1, H2]` of one type, by elimination.
fn type_masses(gamma: f64, rho: f64, t: usize, e: f64, c: &[f64]) -> Result<[f64; 4]> {
    let (a, b) = flips(gamma, t);
    let (a2, b2) = (a / 2.0, b / 2.0);
    let s = [surv(c[L1]), surv(c[L2]), surv(c[H1]), surv(c[H2])];
    // Outflow rates (exit or move) of each state.
    let d_h1 = 1.0 - s[H1] + s[H1] * (a + rho);
    let d_l1 = 1.0 - s[L1] + s[L1] * (b + rho);
    let d_h2 = 1.0 - s[H2] + s[H2] * a2;
    let d_l2 = 1.0 - s[L2] + s[L2] * b2;
    let denom1 = d_h1 - s[H1] * a * s[L1] * b / d_l1;
    if !(denom1 > 0.0) {
        return Err(Error::Infeasible("level-1 class has no outflow".into()));
    }
    let m_h1 = e / denom1;
    let m_l1 = m_h1 * s[H1] * a / d_l1;
    let det = d_h2 * d_l2 - s[L2] * b2 * s[H2] * a2;
    if !(det > 0.0) {
        return Err(Error::Infeasible("level-2 class has no exit".into()));
    }
    let r_h2 = m_h1 * s[H1] * rho;
    let r_l2 = m_l1 * s[L1] * rho;
    let m_h2 = (r_h2 * d_l2 + s[L2] * b2 * r_l2) / det;
    let m_l2 = (d_h2 * r_l2 + s[H2] * a2 * r_h2) / det;
    Ok([m_l1, m_l2, m_h1, m_h2])
}

/// Cutoffs `[L1, L2, H1, H2]` of type `t` given beliefs, by semismooth Newton
/// on the piecewise-linear system (finitely many regime changes).
fn type_cutoffs(gamma: f64, rho: f64, beta: f64, t: usize, beliefs: &[f64; 4]) -> Result<[f64; 4]> {
    let p = four_state_kernel(gamma, rho, t);
    let mut c = [0.5; 4];
    for _ in 0..200 {
        let v: Vec<f64> = c.iter().map(|&x| shortfall(x)).collect();
        let d: Vec<f64> = c.iter().map(|&x| if x <= 0.0 { 0.0 } else if x < 1.0 { 0.5 } else { 1.0 }).collect();
        let mut g = DVector::zeros(4);
        let mut jac = DMatrix::identity(4, 4);
        for i in 0..4 {
            let cont: f64 = (0..4).map(|j| p[(i, j)] * v[j]).sum();
            g[i] = c[i] - beliefs[i] - beta * cont;
            for j in 0..4 {
                jac[(i, j)] -= beta * p[(i, j)] * d[j];
            }
        }
        if sup(g.as_slice()) < 1e-15 {
            return Ok(c);
        }
        let delta = jac.lu().solve(&g).ok_or_else(|| Error::Infeasible("singular cutoff system".into()))?;
        for i in 0..4 {
            c[i] -= delta[i];
        }
    }
    Err(Error::Infeasible("cutoff system did not settle".into()))
}

struct Evaluated {
    cutoffs: [[f64; 4]; 2],
    masses: [[f64; 4]; 2],
    /// Bayes update of the input beliefs.
    implied: [f64; 4],
}

/// The belief map: beliefs → optimal cutoffs → stationary masses → posterior.
fn evaluate(gamma: f64, rho: f64, beta: f64, entry: [f64; 2], beliefs: &[f64; 4]) -> Result<Evaluated> {
    let cutoffs = [
        type_cutoffs(gamma, rho, beta, 0, beliefs)?,
        type_cutoffs(gamma, rho, beta, 1, beliefs)?,
    ];
    let masses = [
        type_masses(gamma, rho, 0, entry[0], &cutoffs[0])?,
        type_masses(gamma, rho, 1, entry[1], &cutoffs[1])?,
    ];
    let mut implied = [0.0; 4];
    for w in 0..4 {
        let total = masses[0][w] + masses[1][w];
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Infeasible(format!("state {} carries no finite mass", STATE_LABELS[w])));
        }
        implied[w] = masses[1][w] / total;
    }
    Ok(Evaluated { cutoffs, masses, implied })
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn gap(ev: &Evaluated, beliefs: &[f64; 4]) -> f64 {
    (0..4).fold(0.0f64, |m, w| m.max((ev.implied[w] - beliefs[w]).abs()))
}

/// Solves the example's eight cutoff and eight stationarity equations directly.
///
/// The unknowns are reduced to the four beliefs: for given beliefs each
/// type's cutoffs solve a 4×4 piecewise-linear system exactly and the masses
/// follow by elimination. The belief fixed point is found by a damped
/// iteration that halves its step whenever a trial point leaves the region
/// where every type exits from every closed class, then polished by Newton's
/// method. Fails with [`Error::Infeasible`] when no stationary equilibrium
/// with finite masses is reached.
pub fn solve_four_state_closed_form(gamma: f64, rho: f64, beta: f64, entry: [f64; 2]) -> Result<EquilibriumSolution> {
    check_inputs(gamma, rho, beta, entry)?;
    let mut b = [entry[1] / (entry[0] + entry[1]); 4];
    let mut ev = evaluate(gamma, rho, beta, entry, &b)?;
    let mut steps = 0;
    while gap(&ev, &b) > 1e-6 {
        steps += 1;
        if steps > 5000 {
            return Err(Error::Infeasible("belief iteration did not settle".into()));
        }
        let mut step = 0.5;
        loop {
            let trial: [f64; 4] = std::array::from_fn(|w| b[w] + step * (ev.implied[w] - b[w]));
            if let Ok(e) = evaluate(gamma, rho, beta, entry, &trial) {
                b = trial;
                ev = e;
                break;
            }
            step *= 0.5;
            if step < 1e-10 {
                return Err(Error::Infeasible("no stationary equilibrium with finite masses".into()));
            }
        }
    }
    // Newton polish on h(b) = implied(b) − b.
    let mut norm = gap(&ev, &b);
    for _ in 0..50 {
        if norm < 1e-15 {
            break;
        }
        steps += 1;
        let h0 = DVector::from_fn(4, |w, _| ev.implied[w] - b[w]);
        let mut jac = DMatrix::<f64>::zeros(4, 4);
        for k in 0..4 {
            let eps = 1e-7;
            let mut up = b;
            let mut dn = b;
            up[k] += eps;
            dn[k] -= eps;
            let hu = evaluate(gamma, rho, beta, entry, &up)?;
            let hd = evaluate(gamma, rho, beta, entry, &dn)?;
            for w in 0..4 {
                jac[(w, k)] = ((hu.implied[w] - up[w]) - (hd.implied[w] - dn[w])) / (2.0 * eps);
            }
        }
        let Some(delta) = jac.lu().solve(&h0) else { break };
        let trial: [f64; 4] = std::array::from_fn(|w| b[w] - delta[w]);
        match evaluate(gamma, rho, beta, entry, &trial) {
            Ok(e) if gap(&e, &trial) < norm => {
                b = trial;
                ev = e;
                norm = gap(&ev, &b);
            }
            _ => break,
        }
    }
    if norm > 1e-11 {
        return Err(Error::Infeasible(format!("belief fixed point not reached (gap {norm:e})")));
    }
    let flat: Vec<f64> = ev.cutoffs.iter().flatten().copied().collect();
    let cutoffs = CutoffProfile { by_type: [flat[0..4].to_vec(), flat[4..8].to_vec()] };
    let survival = [flat[0..4].iter().map(|&c| surv(c)).collect(), flat[4..8].iter().map(|&c| surv(c)).collect()];
    let exit_prob = [
        flat[0..4].iter().map(|&c| 1.0 - surv(c)).collect(),
        flat[4..8].iter().map(|&c| 1.0 - surv(c)).collect(),
    ];
    Ok(EquilibriumSolution {
        beliefs: Beliefs { theta_hat: ev.implied.to_vec() },
        cutoffs,
        masses: MassDistribution { by_type: [ev.masses[0].to_vec(), ev.masses[1].to_vec()] },
        survival,
        exit_prob,
        residual_cutoff: 0.0,
        residual_mass: 0.0,
        residual_belief: norm,
        iterations: steps,
        tolerance: 1e-10,
        payoff_variant: PayoffVariant::MainText,
        off_path_states: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_are_stochastic() {
        for t in 0..2 {
            let m = four_state_kernel(0.8, 0.3, t);
            for i in 0..4 {
                assert!((m.row(i).sum() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uninformative_ratings_give_equal_prices_within_a_level() {
        let s = solve_four_state_closed_form(0.5, 0.3, 0.5, [0.5, 0.5]).unwrap();
        let b = &s.beliefs.theta_hat;
        assert!((b[H1] - b[L1]).abs() < 1e-10);
        assert!((b[H2] - b[L2]).abs() < 1e-10);
    }

    #[test]
    fn price_spreads_grow_with_rating_quality() {
        let mut prev: Option<(f64, f64)> = None;
        for k in 0..9 {
            let gamma = 0.55 + 0.05 * k as f64;
            let s = solve_four_state_closed_form(gamma, 0.3, 0.1, [0.5, 0.5]).unwrap();
            let b = &s.beliefs.theta_hat;
            let (s1, s2) = (b[H1] - b[L1], b[H2] - b[L2]);
            assert!(s2 > s1, "γ = {gamma}: level-2 spread {s2} ≤ level-1 spread {s1}");
            if let Some((p1, p2)) = prev {
                assert!(s1 > p1 && s2 > p2, "spreads not increasing at γ = {gamma}");
            }
            prev = Some((s1, s2));
        }
    }

    #[test]
    fn patient_sellers_with_precise_ratings_have_no_equilibrium() {
        let err = solve_four_state_closed_form(0.95, 0.3, 0.95, [0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn cutoff_equations_hold_at_the_solution() {
        let s = solve_four_state_closed_form(0.65, 0.1, 0.6, [0.5, 0.5]).unwrap();
        for t in 0..2 {
            let p = four_state_kernel(0.65, 0.1, t);
            let c = &s.cutoffs.by_type[t];
            for i in 0..4 {
                let cont: f64 = (0..4).map(|j| p[(i, j)] * shortfall(c[j])).sum();
                assert!((c[i] - s.beliefs.theta_hat[i] - 0.6 * cont).abs() < 1e-13);
            }
        }
    }
}
