//! Numerical verification of equilibrium uniqueness at a computed solution.
//!
//! The equilibrium conditions are stacked as `g(c̄, μ) = 0` with
//!
//! ```text
//! g₁(c̄, μ) = p(θ̂(μ)) + β·Π·EV(c̄) − c̄            (optimal cutoffs)
//! g₂(c̄, μ) = Πᵀ·(F(c̄) ∘ μ) + η − μ              (stationary masses)
//! ```
//!
//! per type. The Jacobian has diagonal blocks `Dg₁ = β·Π·S − I` with
//! `S = diag(EV′(c̄))` and `Dg₂ = Πᵀ·R − I` with `R = diag(F(c̄))`, and the
//! off-diagonal blocks `∂g₁/∂μ` (belief derivatives) and `∂g₂/∂c̄` (density of
//! exits times mass). The verifier checks weighted diagonal dominance of both
//! diagonal blocks and the P-matrix property of `−Dg`.
//!
//! Exit probabilities at the estimated parameters reach 1e−170, far below the
//! resolution of `1 − F(c̄)` in floating point. Wherever a quantity reduces
//! exactly to an exit probability, it is evaluated from the upper-tail
//! function and the elimination is arranged to be subtraction-free.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    beliefs_with_off_path, continuation_derivative, continuation_value, revenue, revenue_derivative,
    solve_equilibrium, CutoffProfile, EquilibriumSolution, MassDistribution, SolverOptions,
};
use crate::error::{Error, Result};
use crate::linalg::GthLu;
use crate::model::{Model, QualityType};

/// Largest dimension for which every principal minor is evaluated.
pub const EXHAUSTIVE_LIMIT: usize = 12;
/// Random principal submatrices drawn when the dimension exceeds [`EXHAUSTIVE_LIMIT`].
pub const DEFAULT_SAMPLES: usize = 512;
const SAMPLE_SEED: u64 = 0x5eed_0f_1e55;
const MAX_SAMPLE_SIZE: usize = 24;

/// Jacobian blocks of the stacked equilibrium conditions.
///
/// Rows and columns are ordered low-type states first, then high-type states.
#[derive(Debug, Clone)]
pub struct JacobianBundle {
    pub n_states: usize,
    /// `∂g₁/∂c̄ = β·Π·S − I`.
    pub dg1: DMatrix<f64>,
    /// `∂g₂/∂μ = Πᵀ·R − I`.
    pub dg2: DMatrix<f64>,
    /// `∂g₁/∂μ`.
    pub off12: DMatrix<f64>,
    /// `∂g₂/∂c̄`.
    pub off21: DMatrix<f64>,
    /// `EV′(c̄)` for the model's payoff variant.
    pub s_diag: Vec<f64>,
    /// `F(c̄)`.
    pub r_diag: Vec<f64>,
    /// `1 − F(c̄)`, evaluated in the upper tail.
    pub exit_diag: Vec<f64>,
    /// Masses at which the blocks were evaluated (stacked order).
    pub mass: Vec<f64>,
    /// Kernel rows per stacked index (destination indices in stacked order).
    rows: Vec<Vec<(usize, f64)>>,
}

impl JacobianBundle {
    /// The full `4|Ω| × 4|Ω|` Jacobian `[[Dg₁, ∂g₁/∂μ], [∂g₂/∂c̄, Dg₂]]`.
    pub fn full(&self) -> DMatrix<f64> {
        let m = 2 * self.n_states;
        let mut j = DMatrix::zeros(2 * m, 2 * m);
        j.view_mut((0, 0), (m, m)).copy_from(&self.dg1);
        j.view_mut((0, m), (m, m)).copy_from(&self.off12);
        j.view_mut((m, 0), (m, m)).copy_from(&self.off21);
        j.view_mut((m, m), (m, m)).copy_from(&self.dg2);
        j
    }
}

fn stacked_rows(model: &Model) -> Vec<Vec<(usize, f64)>> {
    let n = model.n_states();
    QualityType::ALL
        .iter()
        .flat_map(|&ty| {
            let off = ty.index() * n;
            (0..n).map(move |i| model.kernel.row(ty, i).iter().map(|&(j, p)| (off + j, p)).collect::<Vec<_>>())
        })
        .collect()
}

/// Stacked residual `g(c̄, μ)` with `c̄` and `μ` ordered low-type states first.
pub fn stacked_residual(model: &Model, cutoffs: &[f64], masses: &[f64]) -> Vec<f64> {
    let n = model.n_states();
    let p = &model.params;
    let mu = MassDistribution { by_type: [masses[..n].to_vec(), masses[n..].to_vec()] };
    let (beliefs, _) = beliefs_with_off_path(&mu, p);
    let rows = stacked_rows(model);
    let ev: Vec<f64> = cutoffs.iter().map(|&c| continuation_value(c, &model.cost, p.payoff_variant)).collect();
    let mut g = vec![0.0; 4 * n];
    for (k, row) in rows.iter().enumerate() {
        let cont: f64 = row.iter().map(|&(j, q)| q * ev[j]).sum();
        g[k] = revenue(beliefs.theta_hat[k % n], p) + p.beta * cont - cutoffs[k];
    }
    for ty in QualityType::ALL {
        let off = ty.index() * n;
        let eta = model.entry.get(ty);
        for j in 0..n {
            g[2 * n + off + j] = eta[j] - masses[off + j];
        }
    }
    for (k, row) in rows.iter().enumerate() {
        let out = model.cost.cdf(cutoffs[k]) * masses[k];
        for &(j, q) in row {
            g[2 * n + j] += q * out;
        }
    }
    g
}

/// Central finite-difference Jacobian of [`stacked_residual`] (relative step `h`).
pub fn finite_difference_jacobian(model: &Model, cutoffs: &[f64], masses: &[f64], h: f64) -> DMatrix<f64> {
    let m = cutoffs.len();
    let mut x: Vec<f64> = cutoffs.iter().chain(masses).copied().collect();
    let mut jac = DMatrix::zeros(2 * m, 2 * m);
    for k in 0..2 * m {
        let x0 = x[k];
        let step = h * x0.abs().max(1.0);
        x[k] = x0 + step;
        let up = stacked_residual(model, &x[..m], &x[m..]);
        x[k] = x0 - step;
        let dn = stacked_residual(model, &x[..m], &x[m..]);
        x[k] = x0;
        for i in 0..2 * m {
            jac[(i, k)] = (up[i] - dn[i]) / (2.0 * step);
        }
    }
    jac
}

/// Largest entry-wise discrepancy `|a − b| / max(|a|, 1)`.
pub fn relative_discrepancy(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    analytic.iter().zip(numeric.iter()).map(|(a, b)| (a - b).abs() / a.abs().max(1.0)).fold(0.0, f64::max)
}

/// Analytic Jacobian at arbitrary cutoffs and masses.
pub fn assemble_at(model: &Model, cutoffs: &CutoffProfile, masses: &MassDistribution) -> JacobianBundle {
    let n = model.n_states();
    let m = 2 * n;
    let p = &model.params;
    let c: Vec<f64> = cutoffs.by_type.iter().flatten().copied().collect();
    let mu: Vec<f64> = masses.by_type.iter().flatten().copied().collect();
    let s_diag: Vec<f64> = c.iter().map(|&x| continuation_derivative(x, &model.cost, p.payoff_variant)).collect();
    let r_diag: Vec<f64> = c.iter().map(|&x| model.cost.cdf(x)).collect();
    let exit_diag: Vec<f64> = c.iter().map(|&x| model.cost.sf(x)).collect();
    let rows = stacked_rows(model);

    let mut dg1 = DMatrix::from_diagonal_element(m, m, -1.0);
    let mut dg2 = DMatrix::from_diagonal_element(m, m, -1.0);
    let mut off21 = DMatrix::zeros(m, m);
    for (i, row) in rows.iter().enumerate() {
        let density_flow = model.cost.pdf(c[i]) * mu[i];
        for &(j, q) in row {
            dg1[(i, j)] += p.beta * q * s_diag[j];
            dg2[(j, i)] += q * r_diag[i];
            off21[(j, i)] += q * density_flow;
        }
    }
    let (beliefs, _) = beliefs_with_off_path(masses, p);
    let spread = p.theta_high - p.theta_low;
    let mut off12 = DMatrix::zeros(m, m);
    for w in 0..n {
        let (lo, hi) = (mu[w], mu[n + w]);
        let total = lo + hi;
        if total < f64::MIN_POSITIVE {
            continue;
        }
        let dp = revenue_derivative(beliefs.theta_hat[w], p);
        let d_low = -dp * spread * (hi / total) / total;
        let d_high = dp * spread * (lo / total) / total;
        for t in 0..2 {
            off12[(t * n + w, w)] = d_low;
            off12[(t * n + w, n + w)] = d_high;
        }
    }
    JacobianBundle { n_states: n, dg1, dg2, off12, off21, s_diag, r_diag, exit_diag, mass: mu, rows }
}

/// Analytic Jacobian at a converged equilibrium.
pub fn assemble_jacobian(solution: &EquilibriumSolution, model: &Model) -> Result<JacobianBundle> {
    check_solution(solution, model)?;
    Ok(assemble_at(model, &solution.cutoffs, &solution.masses))
}

fn check_solution(solution: &EquilibriumSolution, model: &Model) -> Result<()> {
    if solution.n_states() != model.n_states() {
        return Err(Error::StaleSolution(format!(
            "solution has {} states, model has {}",
            solution.n_states(),
            model.n_states()
        )));
    }
    if !solution.is_converged() {
        return Err(Error::StaleSolution(format!(
            "residual {:.3e} exceeds tolerance {:.3e}",
            solution.max_residual(),
            solution.tolerance
        )));
    }
    Ok(())
}

fn check_weights(m: &DMatrix<f64>, weights: &[f64]) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch("dominance test needs a square matrix".into()));
    }
    if weights.len() != m.nrows() {
        return Err(Error::InvalidWeights(format!("{} weights for a {}-row matrix", weights.len(), m.nrows())));
    }
    if let Some(k) = weights.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidWeights(format!("weight {k} is {}", weights[k])));
    }
    Ok(())
}

/// Row margins `d_j·|a_jj| − Σ_{i≠j} d_i·|a_ji|`.
pub fn dominance_margins(m: &DMatrix<f64>, weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(m, weights)?;
    Ok((0..m.nrows())
        .map(|j| {
            let off: f64 = (0..m.ncols()).filter(|&i| i != j).map(|i| weights[i] * m[(j, i)].abs()).sum();
            weights[j] * m[(j, j)].abs() - off
        })
        .collect())
}

/// Weighted diagonal dominance: every row margin is strictly positive.
pub fn is_diagonally_dominant(m: &DMatrix<f64>, weights: &[f64]) -> Result<bool> {
    Ok(dominance_margins(m, weights)?.iter().all(|&v| v > 0.0))
}

/// Outcome of a P-matrix test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PMatrixCheck {
    pub holds: bool,
    /// True when only a sample of principal minors was examined.
    pub sampled: bool,
    pub minors_checked: usize,
    /// Indices of a principal submatrix with non-positive determinant.
    pub failing_minor: Option<Vec<usize>>,
}

/// All principal minors positive: exhaustive up to [`EXHAUSTIVE_LIMIT`],
/// otherwise leading minors plus [`DEFAULT_SAMPLES`] random principal
/// submatrices (flagged as sampled).
pub fn is_p_matrix(m: &DMatrix<f64>) -> PMatrixCheck {
    is_p_matrix_sampled(m, DEFAULT_SAMPLES, SAMPLE_SEED)
}

/// [`is_p_matrix`] with an explicit sample size and seed for the sampled regime.
pub fn is_p_matrix_sampled(m: &DMatrix<f64>, samples: usize, seed: u64) -> PMatrixCheck {
    assert!(m.is_square(), "P-matrix test needs a square matrix");
    let minor = |idx: &[usize]| -> f64 { m.select_rows(idx).select_columns(idx).determinant() };
    run_p_check(m.nrows(), samples, seed, minor, || leading_pivots(m.clone()))
}

fn run_p_check(
    n: usize,
    samples: usize,
    seed: u64,
    minor: impl Fn(&[usize]) -> f64,
    leading: impl FnOnce() -> std::result::Result<(), usize>,
) -> PMatrixCheck {
    if n <= EXHAUSTIVE_LIMIT {
        let mut checked = 0;
        for mask in 1u32..(1u32 << n) {
            let idx: Vec<usize> = (0..n).filter(|&k| mask & (1 << k) != 0).collect();
            checked += 1;
            if !(minor(&idx) > 0.0) {
                return PMatrixCheck { holds: false, sampled: false, minors_checked: checked, failing_minor: Some(idx) };
            }
        }
        return PMatrixCheck { holds: true, sampled: false, minors_checked: checked, failing_minor: None };
    }
    if let Err(k) = leading() {
        return PMatrixCheck {
            holds: false,
            sampled: true,
            minors_checked: k + 1,
            failing_minor: Some((0..=k).collect()),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in 0..samples {
        let size = rng.gen_range(1..=n.min(MAX_SAMPLE_SIZE));
        let mut idx = rand::seq::index::sample(&mut rng, n, size).into_vec();
        idx.sort_unstable();
        if !(minor(&idx) > 0.0) {
            return PMatrixCheck { holds: false, sampled: true, minors_checked: n + s + 1, failing_minor: Some(idx) };
        }
    }
    PMatrixCheck { holds: true, sampled: true, minors_checked: n + samples, failing_minor: None }
}

/// Unpivoted elimination; `Err(k)` if the `k+1`-th leading minor is not positive.
fn leading_pivots(mut a: DMatrix<f64>) -> std::result::Result<(), usize> {
    let n = a.nrows();
    for k in 0..n {
        let piv = a[(k, k)];
        if !(piv > 0.0) {
            return Err(k);
        }
        for i in k + 1..n {
            let l = a[(i, k)] / piv;
            if l == 0.0 {
                continue;
            }
            for j in k + 1..n {
                let v = a[(k, j)];
                a[(i, j)] -= l * v;
            }
        }
    }
    Ok(())
}

/// Principal minors of `−Dg` evaluated without catastrophic cancellation.
///
/// With `−Dg = [[A, −B], [−C, D]]`, `D = I − ΠᵀR` an M-matrix whose column
/// sums are the exit probabilities, a principal minor factors as
/// `det(D_J)·det(A_J − B_J·D_J⁻¹·C_J)`; `det(D_J)` comes from the
/// subtraction-free factorisation, using exact exit probabilities.
struct StructuredMinors<'a> {
    b: &'a JacobianBundle,
}

impl StructuredMinors<'_> {
    fn m(&self) -> usize {
        2 * self.b.n_states
    }

    /// Subtraction-free factor of `D_Jᵀ` for mass indices `mu_idx` (stacked order).
    fn factor_d(&self, mu_idx: &[usize]) -> std::result::Result<GthLu, usize> {
        let k = mu_idx.len();
        let mut pos = vec![usize::MAX; self.m()];
        for (a, &i) in mu_idx.iter().enumerate() {
            pos[i] = a;
        }
        // Row i of D_Jᵀ: off-diagonal −r_i·π(i, j), row sum exit_i + r_i·Σ_{j∉J} π(i, j).
        let mut off = vec![0.0; k * k];
        let mut leak = vec![0.0; k];
        for (a, &i) in mu_idx.iter().enumerate() {
            let r = self.b.r_diag[i];
            leak[a] = self.b.exit_diag[i];
            for &(j, q) in &self.b.rows[i] {
                if j == i {
                    continue;
                }
                if pos[j] != usize::MAX {
                    off[a * k + pos[j]] = -r * q;
                } else {
                    leak[a] += r * q;
                }
            }
        }
        GthLu::factor(off, leak, k)
    }

    /// Schur complement `A_J − B_J·D_J⁻¹·C_J` and the pivots of `D_J`.
    fn schur(&self, c_idx: &[usize], mu_idx: &[usize]) -> Option<(DMatrix<f64>, Vec<f64>)> {
        let a = -self.b.dg1.select_rows(c_idx).select_columns(c_idx);
        if mu_idx.is_empty() {
            return Some((a, Vec::new()));
        }
        let lu = self.factor_d(mu_idx).ok()?;
        let pivots: Vec<f64> = lu.pivots().collect();
        // B·D⁻¹·C is formed as (B·M)(M⁻¹·D⁻¹·C) with M = diag(μ): belief
        // derivatives scale like 1/μ and mass responses like μ, so both factors
        // stay representable even for states carrying 1e−300 of mass.
        let scale: Vec<f64> = mu_idx.iter().map(|&i| if self.b.mass[i] > 0.0 { self.b.mass[i] } else { 1.0 }).collect();
        let mut bm = self.b.off12.select_rows(c_idx).select_columns(mu_idx);
        for (k, &sk) in scale.iter().enumerate() {
            bm.column_mut(k).scale_mut(sk);
        }
        let cm = self.b.off21.select_rows(mu_idx).select_columns(c_idx);
        // D_J X = C_J, with D_J = (D_Jᵀ)ᵀ.
        let mut x = DMatrix::zeros(lu.dim(), c_idx.len());
        for col in 0..c_idx.len() {
            let mut v: Vec<f64> = cm.column(col).iter().copied().collect();
            lu.solve_transpose(&mut v);
            for (k, vk) in v.iter_mut().enumerate() {
                *vk /= scale[k];
            }
            x.column_mut(col).copy_from_slice(&v);
        }
        Some((a - bm * x, pivots))
    }

    fn split(&self, idx: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let m = self.m();
        let c: Vec<usize> = idx.iter().copied().filter(|&i| i < m).collect();
        let mu: Vec<usize> = idx.iter().copied().filter(|&i| i >= m).map(|i| i - m).collect();
        (c, mu)
    }

    /// A positive number iff the principal minor on `idx` (indices into `−Dg`) is positive.
    fn minor_sign(&self, idx: &[usize]) -> f64 {
        let (c, mu) = self.split(idx);
        match self.schur(&c, &mu) {
            None => 0.0,
            Some((s, _)) if s.nrows() == 0 => 1.0,
            Some((s, _)) => s.determinant(),
        }
    }

    /// Leading minors with the mass block ordered first.
    fn leading(&self) -> std::result::Result<(), usize> {
        let m = self.m();
        let all_c: Vec<usize> = (0..m).collect();
        self.factor_d(&all_c)?;
        match self.schur(&all_c, &all_c) {
            None => Err(0),
            Some((s, _)) => leading_pivots(s).map_err(|k| m + k),
        }
    }
}

/// Dominance verdict for one diagonal block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub holds: bool,
    /// Smallest row margin of the matrix test as computed in floating point.
    pub min_matrix_margin: f64,
    /// Smallest margin of the exact scalar reduction.
    pub min_reduced_margin: f64,
    /// Rows whose matrix margin lies within rounding of zero; decided by the reduction.
    pub unresolved_rows: usize,
    /// Every resolvable row has the same sign in the matrix test and the reduction.
    pub reduction_agrees: bool,
    pub detail: String,
}

/// Result of [`verify_uniqueness_at`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub beta: f64,
    /// `Dg₁ = β·Π·S − I` with weights `1/s`; reduces to `s < 1/β` row-wise.
    pub dg1_dominance: DominanceReport,
    /// Mass block in the proof's orientation with weights `1/F(c̄)`;
    /// reduces to a positive exit probability in every state.
    pub dg2_dominance: DominanceReport,
    /// Sup-norm of `∂g₁/∂μ`.
    pub off12_sup: f64,
    /// Sup-norm of `∂g₂/∂c̄`.
    pub off21_sup: f64,
    /// P-matrix test of `−Dg`.
    pub p_matrix: PMatrixCheck,
    /// Every diagonal entry of `Dg` is negative.
    pub sign_correction_holds: bool,
    /// Range of the cutoffs at which the check was made (the probed box).
    pub cutoff_box: [f64; 2],
    pub passes: bool,
}

const ROUNDING_ULPS: f64 = 8.0;

fn dg1_dominance(b: &JacobianBundle, beta: f64) -> DominanceReport {
    let reduced: Vec<f64> = b.s_diag.iter().map(|&s| 1.0 / s - beta).collect();
    let weights: Vec<f64> = b.s_diag.iter().map(|&s| 1.0 / s).collect();
    let matrix = match dominance_margins(&b.dg1, &weights) {
        Ok(v) => v,
        Err(e) => {
            return DominanceReport {
                holds: false,
                min_matrix_margin: f64::NAN,
                min_reduced_margin: reduced.iter().copied().fold(f64::INFINITY, f64::min),
                unresolved_rows: 0,
                reduction_agrees: false,
                detail: e.to_string(),
            }
        }
    };
    decide(&matrix, &reduced, |j| ROUNDING_ULPS * f64::EPSILON * (b.rows[j].len() as f64 + 2.0) * weights[j])
}

fn dg2_dominance(b: &JacobianBundle) -> DominanceReport {
    // Rows of (Πᵀ R − I)ᵀ = R Π − I with unit weights have margin 1 − F = exit
    // exactly; the proof's (RΠ′ − I)′ with weights 1/F has margin exit/F.
    let t = b.dg2.transpose();
    let ones = vec![1.0; t.nrows()];
    let matrix = dominance_margins(&t, &ones).expect("unit weights are valid");
    decide(&matrix, &b.exit_diag, |j| ROUNDING_ULPS * f64::EPSILON * (b.rows[j].len() as f64 + 2.0))
}

fn decide(matrix: &[f64], reduced: &[f64], bound: impl Fn(usize) -> f64) -> DominanceReport {
    let mut unresolved = 0;
    let mut agrees = true;
    let mut holds = true;
    let mut worst: Option<usize> = None;
    for j in 0..matrix.len() {
        let tol = bound(j);
        let row_holds = if matrix[j].abs() <= tol {
            unresolved += 1;
            reduced[j] > 0.0
        } else {
            if (matrix[j] > 0.0) != (reduced[j] > 0.0) {
                agrees = false;
            }
            matrix[j] > 0.0
        };
        if !row_holds {
            holds = false;
            worst.get_or_insert(j);
        }
    }
    let min_m = matrix.iter().copied().fold(f64::INFINITY, f64::min);
    let min_r = reduced.iter().copied().fold(f64::INFINITY, f64::min);
    let detail = match worst {
        Some(j) => format!("row {j} fails (matrix margin {:.3e}, reduced margin {:.3e})", matrix[j], reduced[j]),
        None => format!("{} rows dominant, {unresolved} decided by the exact reduction", matrix.len()),
    };
    DominanceReport {
        holds: holds && agrees,
        min_matrix_margin: min_m,
        min_reduced_margin: min_r,
        unresolved_rows: unresolved,
        reduction_agrees: agrees,
        detail,
    }
}

fn sup_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Checks the uniqueness conditions at a converged equilibrium.
pub fn verify_uniqueness_at(solution: &EquilibriumSolution, model: &Model) -> Result<UniquenessReport> {
    let bundle = assemble_jacobian(solution, model)?;
    Ok(verify_bundle(&bundle, model.params.beta, &solution.cutoffs))
}

fn verify_bundle(b: &JacobianBundle, beta: f64, cutoffs: &CutoffProfile) -> UniquenessReport {
    let dg1_dominance = dg1_dominance(b, beta);
    let dg2_dominance = dg2_dominance(b);
    let m = 2 * b.n_states;
    // Diagonal of Dg₁ is βπ_jj s_j − 1 ≤ β − 1 < 0; that of Dg₂ is
    // −(exit_j + F_j·(1 − π_jj)), negative whenever the exit probability is.
    let sign_correction_holds = (0..m).all(|j| b.dg1[(j, j)] < 0.0)
        && (0..m).all(|j| {
            let stay = b.rows[j].iter().find(|&&(k, _)| k == j).map_or(0.0, |&(_, q)| q);
            b.exit_diag[j] + b.r_diag[j] * (1.0 - stay) > 0.0
        });
    let structured = StructuredMinors { b };
    let p_matrix = run_p_check(
        2 * m,
        DEFAULT_SAMPLES,
        SAMPLE_SEED,
        |idx| structured.minor_sign(idx),
        || structured.leading(),
    );
    let flat = cutoffs.by_type.iter().flatten().copied();
    let cutoff_box = flat.fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], c| [lo.min(c), hi.max(c)]);
    let passes = dg1_dominance.holds && dg2_dominance.holds && p_matrix.holds && sign_correction_holds;
    UniquenessReport {
        beta,
        dg1_dominance,
        dg2_dominance,
        off12_sup: sup_norm(&b.off12),
        off21_sup: sup_norm(&b.off21),
        p_matrix,
        sign_correction_holds,
        cutoff_box,
        passes,
    }
}

/// One grid point of [`estimate_beta_bar`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaPoint {
    pub beta: f64,
    /// `None` when the equilibrium could not be computed.
    pub passes: Option<bool>,
    pub error: Option<String>,
    pub report: Option<UniquenessReport>,
}

/// Result of the discount-threshold scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaBarReport {
    /// Smallest grid β from which the verifier passes at every larger grid point.
    pub beta_bar: Option<f64>,
    pub points: Vec<BetaPoint>,
    /// Grid values at which a pass is followed by a failure at a larger β.
    pub monotonicity_violations: Vec<f64>,
    /// Grid values skipped because the equilibrium solver failed.
    pub skipped: Vec<f64>,
}

/// Scans an increasing grid of discount factors for the uniqueness threshold.
pub fn estimate_beta_bar(model: &Model, beta_grid: &[f64], options: &SolverOptions) -> Result<BetaBarReport> {
    if beta_grid.is_empty() {
        return Err(Error::InvalidGrid("empty β grid".into()));
    }
    if beta_grid.windows(2).any(|w| w[0] >= w[1]) || beta_grid.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
        return Err(Error::InvalidGrid("β grid must be strictly increasing inside (0, 1)".into()));
    }
    let points: Vec<BetaPoint> = beta_grid
        .par_iter()
        .map(|&beta| {
            let run = || -> Result<UniquenessReport> {
                let m = model.with_beta(beta)?;
                let sol = solve_equilibrium(&m, options)?;
                verify_uniqueness_at(&sol, &m)
            };
            match run() {
                Ok(r) => BetaPoint { beta, passes: Some(r.passes), error: None, report: Some(r) },
                Err(e) => BetaPoint { beta, passes: None, error: Some(e.to_string()), report: None },
            }
        })
        .collect();
    let skipped: Vec<f64> = points.iter().filter(|p| p.passes.is_none()).map(|p| p.beta).collect();
    let evaluated: Vec<(f64, bool)> = points.iter().filter_map(|p| p.passes.map(|v| (p.beta, v))).collect();
    let mut beta_bar = None;
    for &(beta, pass) in evaluated.iter().rev() {
        if !pass {
            break;
        }
        beta_bar = Some(beta);
    }
    let mut monotonicity_violations = Vec::new();
    let mut seen_pass = false;
    for &(beta, pass) in &evaluated {
        if pass {
            seen_pass = true;
        } else if seen_pass {
            monotonicity_violations.push(beta);
        }
    }
    Ok(BetaBarReport { beta_bar, points, monotonicity_violations, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        CostDistribution, EntryMeasure, ModelParams, PayoffVariant, RatingGrid, SalesGrid, StateSpace, TransitionKernel,
    };

    fn single_state(beta: f64) -> Model {
        let params = ModelParams { theta_low: 0.5, theta_high: 0.5, beta, ..ModelParams::default() };
        let space = StateSpace::new(RatingGrid::new(vec![5.0]).unwrap(), SalesGrid::unit_buckets(1).unwrap());
        let kernel = TransitionKernel::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        let entry = EntryMeasure::point_mass(&params, &space);
        Model::new(params, space, kernel, CostDistribution::Uniform01, entry).unwrap()
    }

    #[test]
    fn hand_computed_s_entry() {
        let m = single_state(0.9);
        let c = CutoffProfile { by_type: [vec![0.5], vec![0.5]] };
        let mu = MassDistribution { by_type: [vec![1.0], vec![1.0]] };
        let b = assemble_at(&m, &c, &mu);
        assert_eq!(m.params.payoff_variant, PayoffVariant::SurvivalWeighted);
        assert!((b.s_diag[0] - 0.5).abs() < 1e-15);
        assert!((b.dg1[(0, 0)] + 0.55).abs() < 1e-15);
    }

    #[test]
    fn myopic_block_is_minus_identity() {
        let m = single_state(0.0);
        let c = CutoffProfile { by_type: [vec![0.3], vec![0.7]] };
        let mu = MassDistribution { by_type: [vec![1.0], vec![2.0]] };
        let b = assemble_at(&m, &c, &mu);
        assert_eq!(b.dg1, -DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn p_matrix_examples() {
        assert!(is_p_matrix(&DMatrix::identity(5, 5)).holds);
        assert!(is_p_matrix(&DMatrix::identity(40, 40)).holds);
        assert!(is_p_matrix(&DMatrix::identity(40, 40)).sampled);
        assert!(!is_p_matrix(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).holds);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let r = is_p_matrix(&m);
        assert!(r.holds && !r.sampled && r.minors_checked == 3);
    }

    #[test]
    fn dominance_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!(is_diagonally_dominant(&i, &[1.0; 3]).unwrap());
        let ones = DMatrix::from_element(2, 2, 1.0);
        assert!(!is_diagonally_dominant(&ones, &[1.0, 1.0]).unwrap());
        assert!(matches!(is_diagonally_dominant(&i, &[1.0, 0.0, 1.0]), Err(Error::InvalidWeights(_))));
    }

    #[test]
    fn single_state_residual_map_matches_its_jacobian() {
        let m = single_state(0.9);
        let b = assemble_at(
            &m,
            &CutoffProfile { by_type: [vec![0.4], vec![0.6]] },
            &MassDistribution { by_type: [vec![0.7], vec![1.3]] },
        );
        let fd = finite_difference_jacobian(&m, &[0.4, 0.6], &[0.7, 1.3], 1e-6);
        assert!(relative_discrepancy(&b.full(), &fd) < 1e-8);
    }
}
