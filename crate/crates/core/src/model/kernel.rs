//! Type-dependent Markov kernels over the public state.
//!
//! Ratings follow a Tauchen discretization of
//! `r′ = ξ·r + (1 − ξ)·ρ_θ + ε`, `ε ~ N(0, σ_r)`, with the tails beyond the
//! outer cell midpoints assigned to the boundary cells. Sales climb an
//! absorbing ladder one bucket at a time. The two evolve independently given
//! the type, so the state kernel is their Kronecker product.

use nalgebra::DMatrix;
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use super::cost::{std_normal_cdf, std_normal_sf};
use super::params::{ModelParams, QualityType};
use super::space::{RatingGrid, SalesGrid, StateSpace};
use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Probability that `N(mean, sd)` falls in `[lo, hi]`, taking each difference
/// on the side of the distribution where it does not cancel.
fn normal_interval(lo: f64, hi: f64, mean: f64, sd: f64) -> f64 {
    let zl = (lo - mean) / sd;
    let zh = (hi - mean) / sd;
    let p = if zl >= 0.0 {
        std_normal_sf(zl) - std_normal_sf(zh)
    } else {
        std_normal_cdf(zh) - std_normal_cdf(zl)
    };
    p.max(0.0)
}

/// Tauchen rating kernel for one type.
pub fn build_tauchen_rating_kernel(params: &ModelParams, grid: &RatingGrid, ty: QualityType) -> Result<DMatrix<f64>> {
    tauchen(grid, params.xi, params.rho(ty), params.sigma_r)
}

/// Tauchen discretization of `r′ = ξ·r + (1 − ξ)·ρ + N(0, σ)` on `grid`.
pub fn tauchen(grid: &RatingGrid, xi: f64, rho: f64, sigma: f64) -> Result<DMatrix<f64>> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("rating grid needs at least one point".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::param("sigma_r", format!("must be > 0, got {sigma}")));
    }
    let pts = grid.points();
    let n = pts.len();
    let mut m = DMatrix::zeros(n, n);
    if n == 1 {
        m[(0, 0)] = 1.0;
        return Ok(m);
    }
    let mids: Vec<f64> = pts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    for (j, &r) in pts.iter().enumerate() {
        let mean = xi * r + (1.0 - xi) * rho;
        m[(j, 0)] = std_normal_cdf((mids[0] - mean) / sigma);
        for k in 1..n - 1 {
            m[(j, k)] = normal_interval(mids[k - 1], mids[k], mean, sigma);
        }
        m[(j, n - 1)] = std_normal_sf((mids[n - 2] - mean) / sigma);
    }
    Ok(m)
}

/// Sales ladder for the model parameters.
pub fn build_sales_kernel(params: &ModelParams, grid: &SalesGrid) -> Result<DMatrix<f64>> {
    if !(params.gamma_sales > 0.0 && params.gamma_sales < 1.0) {
        return Err(Error::param("gamma_sales", format!("must lie in (0, 1), got {}", params.gamma_sales)));
    }
    Ok(sales_ladder(params.gamma_sales, grid.len()))
}

/// Upper-bidiagonal ladder on `n` buckets with graduation probability `gamma ∈ [0, 1]`.
pub fn sales_ladder(gamma: f64, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        if k + 1 < n {
            m[(k, k)] = 1.0 - gamma;
            m[(k, k + 1)] = gamma;
        } else {
            m[(k, k)] = 1.0;
        }
    }
    m
}

/// Kronecker product `rating ⊗ sales`, matching the state index map.
pub fn build_product_kernel(rating: &DMatrix<f64>, sales: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_stochastic(rating, "rating kernel")?;
    check_stochastic(sales, "sales kernel")?;
    Ok(rating.kronecker(sales))
}

fn check_stochastic(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!("{what} must be square and non-empty")));
    }
    for i in 0..m.nrows() {
        let row = m.row(i);
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidParameter {
                name: "kernel",
                reason: format!("{what} row {i} has an entry outside [0, 1]"),
            });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidParameter {
                name: "kernel",
                reason: format!("{what} row {i} sums to {s}"),
            });
        }
    }
    Ok(())
}

/// Per-type state kernels `Π_low`, `Π_high` with cached sparsity and block structure.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    matrices: [DMatrix<f64>; 2],
    rows: [Vec<Vec<(usize, f64)>>; 2],
    blocks: Vec<Vec<usize>>,
    block_of: Vec<usize>,
}

impl TransitionKernel {
    /// Validates and wraps two row-stochastic matrices of equal size.
    pub fn new(low: DMatrix<f64>, high: DMatrix<f64>) -> Result<Self> {
        check_stochastic(&low, "low-type kernel")?;
        check_stochastic(&high, "high-type kernel")?;
        if low.shape() != high.shape() {
            return Err(Error::DimensionMismatch("per-type kernels differ in size".into()));
        }
        let sparse = |m: &DMatrix<f64>| -> Vec<Vec<(usize, f64)>> {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).filter(|&j| m[(i, j)] > 0.0).map(|j| (j, m[(i, j)])).collect())
                .collect()
        };
        let rows = [sparse(&low), sparse(&high)];
        let n = low.nrows();
        let mut g = DiGraph::<(), ()>::with_capacity(n, 0);
        let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
        for i in 0..n {
            let mut targets: Vec<usize> = rows[0][i].iter().chain(rows[1][i].iter()).map(|&(j, _)| j).collect();
            targets.sort_unstable();
            targets.dedup();
            for j in targets {
                if j != i {
                    g.add_edge(nodes[i], nodes[j], ());
                }
            }
        }
        // Tarjan yields components sinks-first; reverse so upstream blocks come first.
        let mut blocks: Vec<Vec<usize>> = tarjan_scc(&g)
            .into_iter()
            .rev()
            .map(|c| {
                let mut v: Vec<usize> = c.into_iter().map(|x| x.index()).collect();
                v.sort_unstable();
                v
            })
            .collect();
        blocks.shrink_to_fit();
        let mut block_of = vec![0; n];
        for (b, members) in blocks.iter().enumerate() {
            for &s in members {
                block_of[s] = b;
            }
        }
        Ok(TransitionKernel { matrices: [low, high], rows, blocks, block_of })
    }

    /// Tauchen ⊗ sales-ladder kernels for both types.
    pub fn from_params(params: &ModelParams, space: &StateSpace) -> Result<Self> {
        let sales = build_sales_kernel(params, space.sales_grid())?;
        let build = |ty| -> Result<DMatrix<f64>> {
            let r = build_tauchen_rating_kernel(params, space.rating_grid(), ty)?;
            build_product_kernel(&r, &sales)
        };
        Self::new(build(QualityType::Low)?, build(QualityType::High)?)
    }

    pub fn n_states(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn matrix(&self, ty: QualityType) -> &DMatrix<f64> {
        &self.matrices[ty.index()]
    }

    /// Transition probability `Π_θ(from, to)`.
    pub fn prob(&self, ty: QualityType, from: usize, to: usize) -> f64 {
        self.matrices[ty.index()][(from, to)]
    }

    /// Positive entries of row `from`, ascending by destination.
    pub fn row(&self, ty: QualityType, from: usize) -> &[(usize, f64)] {
        &self.rows[ty.index()][from]
    }

    /// Strongly connected components of the joint positive pattern, in
    /// topological order (no edge runs from a later block to an earlier one).
    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block_of(&self, state: usize) -> usize {
        self.block_of[state]
    }
}

/// Outcome of an assumption check.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AssumptionReport {
    pub holds: bool,
    pub detail: String,
    /// For A1: a strongly connected component that is not the whole space
    /// (states listed by index); for A2: the first violating probe point.
    pub witness: Option<serde_json::Value>,
}

/// Number of strongly connected components of a single matrix's positive pattern
/// and the closed (sink) component discovered first.
fn scc_of(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut g = DiGraph::<(), ()>::with_capacity(n, 0);
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)] > 0.0 {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    tarjan_scc(&g)
        .into_iter()
        .map(|c| {
            let mut v: Vec<usize> = c.into_iter().map(|x| x.index()).collect();
            v.sort_unstable();
            v
        })
        .collect()
}

/// Irreducibility of a single stochastic matrix.
pub fn is_irreducible(m: &DMatrix<f64>) -> bool {
    scc_of(m).len() == 1
}

/// A1: every per-type kernel is irreducible.
pub fn validate_assumption_a1(kernel: &TransitionKernel) -> AssumptionReport {
    for ty in QualityType::ALL {
        let comps = scc_of(kernel.matrix(ty));
        if comps.len() > 1 {
            // Tarjan lists sinks first: the first component is a closed class.
            let closed = comps[0].clone();
            return AssumptionReport {
                holds: false,
                detail: format!(
                    "{} kernel is reducible: {} strongly connected components; closed class of {} state(s) starting at state {}",
                    ty.label(),
                    comps.len(),
                    closed.len(),
                    closed[0]
                ),
                witness: Some(serde_json::json!({ "type": ty.label(), "components": comps.len(), "closed_class": closed })),
            };
        }
    }
    AssumptionReport { holds: true, detail: "both kernels irreducible".into(), witness: None }
}
