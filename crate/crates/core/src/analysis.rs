//! Counterfactuals and replication analytics on solved equilibria and
//! simulated panels.
//!
//! Values are reported in the model's normalized units and in dollars. The
//! conversion chain is explicit: normalized value × dollars per gram × grams
//! per order × orders per week.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{continuation_value, solve_equilibrium, EquilibriumSolution, SolverOptions};
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, QualityType, RatingGrid, StateSpace};
use crate::simulator::{simulate_panel, Panel, SimulationConfig};

/// How many orders a seller fills per week.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum OrdersPerWeek {
    /// A fixed rate; the default is one order per week, the model's own
    /// period (one transaction per seller-week).
    Fixed(f64),
    /// Implied by the sales ladder: a bucket of width `w` is crossed in `1/γ`
    /// weeks on average, i.e. at `γ·w` orders per week (the open top bucket
    /// reuses the width of the one below), averaged over the stationary
    /// seller masses. Where the open top bucket absorbs most of the mass this
    /// rate is dominated by that bucket's nominal width.
    FromOccupancy,
}

/// Conversion from normalized values to dollars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DollarScale {
    pub dollars_per_gram: f64,
    pub grams_per_order: f64,
    pub orders_per_week: OrdersPerWeek,
}

impl Default for DollarScale {
    fn default() -> Self {
        DollarScale { dollars_per_gram: 35.0, grams_per_order: 20.0, orders_per_week: OrdersPerWeek::Fixed(1.0) }
    }
}

/// The numbers behind a dollar figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionChain {
    pub dollars_per_gram: f64,
    pub grams_per_order: f64,
    pub orders_per_week: f64,
    /// Product of the three.
    pub dollars_per_unit: f64,
}

impl DollarScale {
    /// Resolves the conversion for a solved model.
    pub fn chain(&self, solution: &EquilibriumSolution, model: &Model) -> ConversionChain {
        let orders_per_week = match self.orders_per_week {
            OrdersPerWeek::Fixed(x) => x,
            OrdersPerWeek::FromOccupancy => implied_orders_per_week(solution, model),
        };
        ConversionChain {
            dollars_per_gram: self.dollars_per_gram,
            grams_per_order: self.grams_per_order,
            orders_per_week,
            dollars_per_unit: self.dollars_per_gram * self.grams_per_order * orders_per_week,
        }
    }
}

/// Mass-weighted weekly order rate implied by the sales ladder.
pub fn implied_orders_per_week(solution: &EquilibriumSolution, model: &Model) -> f64 {
    let grid = model.space.sales_grid();
    let gamma = model.params.gamma_sales;
    let width = |b: usize| -> f64 {
        match grid.bucket(b) {
            (lo, Some(hi)) => (hi - lo) as f64,
            (_, None) if b > 0 => {
                let (lo, hi) = grid.bucket(b - 1);
                (hi.expect("inner buckets are bounded") - lo) as f64
            }
            _ => 1.0,
        }
    };
    let mut total = 0.0;
    let mut weighted = 0.0;
    for s in 0..model.n_states() {
        let m = solution.masses.by_type[0][s] + solution.masses.by_type[1][s];
        let (_, b) = model.space.coords(s);
        total += m;
        weighted += m * gamma * width(b);
    }
    if total > 0.0 && weighted.is_finite() {
        weighted / total
    } else {
        gamma * width(0)
    }
}

/// `E_c[V_θ(ω, c̃)]`: the value of entering a week in `state` before the cost
/// shock is drawn.
pub fn expected_value(solution: &EquilibriumSolution, model: &Model, ty: QualityType, state: usize) -> f64 {
    continuation_value(solution.cutoffs.get(ty)[state], &model.cost, model.params.payoff_variant)
}

fn check(solution: &EquilibriumSolution, model: &Model) -> Result<()> {
    if solution.n_states() != model.n_states() {
        return Err(Error::StaleSolution(format!(
            "solution has {} states, model has {}",
            solution.n_states(),
            model.n_states()
        )));
    }
    if !solution.is_converged() {
        return Err(Error::StaleSolution(format!("residual {:.3e} exceeds tolerance", solution.max_residual())));
    }
    Ok(())
}

/// Expected lifetime profit of an entrant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryProfit {
    pub quality: QualityType,
    pub normalized: f64,
    pub dollars: f64,
}

/// Entry-measure-weighted expected value of a new seller of the type.
pub fn expected_entry_profit(
    solution: &EquilibriumSolution,
    model: &Model,
    ty: QualityType,
    scale: &DollarScale,
) -> Result<EntryProfit> {
    check(solution, model)?;
    let normalized: f64 = (0..model.n_states())
        .map(|s| model.entry.initial_prob(ty, s))
        .enumerate()
        .filter(|&(_, p)| p > 0.0)
        .map(|(s, p)| p * expected_value(solution, model, ty, s))
        .sum();
    let chain = scale.chain(solution, model);
    Ok(EntryProfit { quality: ty, normalized, dollars: normalized * chain.dollars_per_unit })
}

/// Both types' entry profits with the conversion used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryProfitReport {
    pub low: EntryProfit,
    pub high: EntryProfit,
    /// High over low, in normalized units.
    pub high_low_ratio: f64,
    pub conversion: ConversionChain,
}

pub fn entry_profit_report(solution: &EquilibriumSolution, model: &Model, scale: &DollarScale) -> Result<EntryProfitReport> {
    let low = expected_entry_profit(solution, model, QualityType::Low, scale)?;
    let high = expected_entry_profit(solution, model, QualityType::High, scale)?;
    Ok(EntryProfitReport {
        high_low_ratio: high.normalized / low.normalized,
        low,
        high,
        conversion: scale.chain(solution, model),
    })
}

/// One type's loss from a rating change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReputationLoss {
    pub quality: QualityType,
    pub value_from: f64,
    pub value_to: f64,
    /// `E[V(ω_from)] − E[V(ω_to)]`, normalized units.
    pub npv_loss: f64,
    pub npv_loss_dollars: f64,
    /// `npv_loss / E[V(ω_from)]`.
    pub pct_loss: f64,
}

/// Result of [`returns_to_reputation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnsReport {
    pub from_rating: f64,
    pub to_rating: f64,
    /// Grid ratings actually used.
    pub from_grid_rating: f64,
    pub to_grid_rating: f64,
    /// True when a requested rating was not a grid point.
    pub snapped: bool,
    pub sales_bucket: usize,
    pub from_state: usize,
    pub to_state: usize,
    pub low: ReputationLoss,
    pub high: ReputationLoss,
    pub conversion: ConversionChain,
}

/// Loss in expected future profit when the rating moves from `from_rating`
/// to `to_rating` at a fixed sales bucket. Off-grid ratings are snapped to
/// the nearest grid point (with a warning).
pub fn returns_to_reputation(
    solution: &EquilibriumSolution,
    model: &Model,
    from_rating: f64,
    to_rating: f64,
    sales_bucket: usize,
    scale: &DollarScale,
) -> Result<ReturnsReport> {
    check(solution, model)?;
    if sales_bucket >= model.space.n_buckets() {
        return Err(Error::param(
            "sales_bucket",
            format!("bucket {sales_bucket} does not exist ({} buckets)", model.space.n_buckets()),
        ));
    }
    let grid = model.space.rating_grid();
    let (fi, fs) = grid.snap(from_rating);
    let (ti, ts) = grid.snap(to_rating);
    if fs || ts {
        log::warn!(
            "ratings {from_rating} -> {to_rating} snapped to grid points {} -> {}",
            grid.points()[fi],
            grid.points()[ti]
        );
    }
    let from_state = model.space.index(fi, sales_bucket);
    let to_state = model.space.index(ti, sales_bucket);
    let chain = scale.chain(solution, model);
    let loss = |ty| {
        let value_from = expected_value(solution, model, ty, from_state);
        let value_to = expected_value(solution, model, ty, to_state);
        let npv_loss = value_from - value_to;
        ReputationLoss {
            quality: ty,
            value_from,
            value_to,
            npv_loss,
            npv_loss_dollars: npv_loss * chain.dollars_per_unit,
            pct_loss: if from_state == to_state { 0.0 } else { npv_loss / value_from },
        }
    };
    Ok(ReturnsReport {
        from_rating,
        to_rating,
        from_grid_rating: grid.points()[fi],
        to_grid_rating: grid.points()[ti],
        snapped: fs || ts,
        sales_bucket,
        from_state,
        to_state,
        low: loss(QualityType::Low),
        high: loss(QualityType::High),
        conversion: chain,
    })
}

/// Per-type outcomes of one equilibrium, at the entry state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeOutcome {
    /// Cutoffs at the entry state, `[low, high]`.
    pub entry_cutoff: [f64; 2],
    /// One-week survival at the entry state, `[low, high]`.
    pub entry_survival: [f64; 2],
    /// Expected entry profit, `[low, high]`, normalized units.
    pub entry_profit: [f64; 2],
    /// Largest cutoff gap between the types over all states.
    pub max_type_cutoff_gap: f64,
    /// Price (belief) at the entry state.
    pub entry_price: f64,
}

fn regime_outcome(solution: &EquilibriumSolution, model: &Model) -> Result<RegimeOutcome> {
    let e = model.space.entry_state();
    let scale = DollarScale { orders_per_week: OrdersPerWeek::Fixed(1.0), ..DollarScale::default() };
    let lo = expected_entry_profit(solution, model, QualityType::Low, &scale)?;
    let hi = expected_entry_profit(solution, model, QualityType::High, &scale)?;
    let gap = solution.cutoffs.by_type[0]
        .iter()
        .zip(&solution.cutoffs.by_type[1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(RegimeOutcome {
        entry_cutoff: [solution.cutoffs.by_type[0][e], solution.cutoffs.by_type[1][e]],
        entry_survival: [solution.survival[0][e], solution.survival[1][e]],
        entry_profit: [lo.normalized, hi.normalized],
        max_type_cutoff_gap: gap,
        entry_price: solution.beliefs.theta_hat[e],
    })
}

/// Baseline versus a market without ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoRatingReport {
    pub baseline: RegimeOutcome,
    pub no_rating: RegimeOutcome,
    /// `no_rating.entry_profit[high] − baseline.entry_profit[high]`.
    pub high_profit_change: f64,
    pub high_survival_change: f64,
}

/// Solves the model on `space` and on the same sales ladder with a single
/// rating point (ratings carry no information), and compares the two.
pub fn no_rating_counterfactual(params: &ModelParams, space: &StateSpace, options: &SolverOptions) -> Result<NoRatingReport> {
    let base_model = Model::normal(params.clone(), space.clone())?;
    let base = solve_equilibrium(&base_model, options)?;
    let top = space.rating_grid().bounds()[1];
    let flat_space = StateSpace::new(RatingGrid::new(vec![top])?, space.sales_grid().clone());
    let flat_model = Model::normal(params.clone(), flat_space)?;
    let flat = solve_equilibrium(&flat_model, &SolverOptions { warm_start: None, ..options.clone() })?;
    let baseline = regime_outcome(&base, &base_model)?;
    let no_rating = regime_outcome(&flat, &flat_model)?;
    Ok(NoRatingReport {
        high_profit_change: no_rating.entry_profit[1] - baseline.entry_profit[1],
        high_survival_change: no_rating.entry_survival[1] - baseline.entry_survival[1],
        baseline,
        no_rating,
    })
}

/// Dollar gain from abandoning the identity in `state` and re-entering fresh
/// at the entry fee: `$E[V(ω₀)] − $E[V(state)] − fee`.
pub fn sybil_attack_value(
    solution: &EquilibriumSolution,
    model: &Model,
    state: usize,
    ty: QualityType,
    entry_fee_dollars: f64,
    scale: &DollarScale,
) -> Result<f64> {
    check(solution, model)?;
    if state >= model.n_states() {
        return Err(Error::param("state", format!("state {state} outside a {}-state space", model.n_states())));
    }
    let chain = scale.chain(solution, model);
    let fresh = expected_entry_profit(solution, model, ty, scale)?.dollars;
    let current = expected_value(solution, model, ty, state) * chain.dollars_per_unit;
    Ok(fresh - current - entry_fee_dollars)
}

/// A numeric field of [`ModelParams`] by name.
pub fn get_param(params: &ModelParams, name: &str) -> Result<f64> {
    let v = serde_json::to_value(params).map_err(|e| Error::Config(e.to_string()))?;
    v.get(name)
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| Error::Config(format!("`{name}` is not a numeric model parameter")))
}

/// Copy of `params` with the numeric field `name` set to `value`.
pub fn with_param(params: &ModelParams, name: &str, value: f64) -> Result<ModelParams> {
    let mut v = serde_json::to_value(params).map_err(|e| Error::Config(e.to_string()))?;
    match v.get_mut(name) {
        Some(slot) if slot.is_number() => *slot = serde_json::json!(value),
        _ => return Err(Error::Config(format!("`{name}` is not a numeric model parameter"))),
    }
    let p: ModelParams = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    p.validate()?;
    Ok(p)
}

/// Quantities recorded by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    /// Mean observed price per type (and pooled).
    AveragePrice,
    /// Mean age at exit per type, over vendors that exit.
    MeanExitAge,
    /// Transactions (weeks with a sale) per vendor, per type.
    TotalSales,
    /// Expected entry profit per type (normalized units; no simulation noise).
    EntryProfit,
    /// Share of high types among active sellers, by age in weeks.
    HighShareByAge,
}

impl SweepMetric {
    pub const ALL: [SweepMetric; 5] = [
        SweepMetric::AveragePrice,
        SweepMetric::MeanExitAge,
        SweepMetric::TotalSales,
        SweepMetric::EntryProfit,
        SweepMetric::HighShareByAge,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SweepMetric::AveragePrice => "average_price",
            SweepMetric::MeanExitAge => "mean_exit_age",
            SweepMetric::TotalSales => "total_sales",
            SweepMetric::EntryProfit => "entry_profit",
            SweepMetric::HighShareByAge => "high_share_by_age",
        }
    }
}

/// A one-parameter comparative-statics experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Field of [`ModelParams`].
    pub parameter: String,
    pub values: Vec<f64>,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<SweepMetric>,
}

fn all_metrics() -> Vec<SweepMetric> {
    SweepMetric::ALL.to_vec()
}

/// One line of the long-form sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub metric: String,
    /// `low`, `high`, `all`, or the age for age profiles.
    pub group: String,
    pub mean: f64,
    /// Standard deviation across the simulated units behind the mean.
    pub sd: f64,
    pub n: usize,
    pub seed: u64,
    /// Empty on success; the failure otherwise (the other columns are NaN).
    pub error: String,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 { (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    (m, sd)
}

/// Metrics of one solved-and-simulated market.
pub fn market_metrics(
    solution: &EquilibriumSolution,
    model: &Model,
    panel: &Panel,
    metrics: &[SweepMetric],
) -> Result<Vec<(String, String, f64, f64, usize)>> {
    let mut out = Vec::new();
    let type_of = |v: &crate::simulator::VendorHistory| v.meta.true_type.map(|t| t.index());
    for &metric in metrics {
        let name = metric.label().to_string();
        match metric {
            SweepMetric::AveragePrice => {
                let mut by = [Vec::new(), Vec::new(), Vec::new()];
                for v in &panel.vendors {
                    for p in v.observations.iter().filter_map(|o| o.price_obs) {
                        if let Some(t) = type_of(v) {
                            by[t].push(p);
                        }
                        by[2].push(p);
                    }
                }
                for (g, label) in ["low", "high", "all"].iter().enumerate() {
                    let (m, s) = mean_sd(&by[g]);
                    out.push((name.clone(), label.to_string(), m, s, by[g].len()));
                }
            }
            SweepMetric::MeanExitAge | SweepMetric::TotalSales => {
                let mut by = [Vec::new(), Vec::new()];
                for v in &panel.vendors {
                    let Some(t) = type_of(v) else { continue };
                    if metric == SweepMetric::MeanExitAge {
                        if v.exited() {
                            by[t].push(v.observations.last().expect("non-empty").age as f64);
                        }
                    } else {
                        by[t].push(v.observations.iter().filter(|o| o.price_obs.is_some()).count() as f64);
                    }
                }
                for (g, label) in ["low", "high"].iter().enumerate() {
                    let (m, s) = mean_sd(&by[g]);
                    out.push((name.clone(), label.to_string(), m, s, by[g].len()));
                }
            }
            SweepMetric::EntryProfit => {
                let scale = DollarScale { orders_per_week: OrdersPerWeek::Fixed(1.0), ..DollarScale::default() };
                for ty in QualityType::ALL {
                    let p = expected_entry_profit(solution, model, ty, &scale)?;
                    out.push((name.clone(), ty.label().to_string(), p.normalized, 0.0, 1));
                }
            }
            SweepMetric::HighShareByAge => {
                let mut counts: Vec<(usize, usize)> = Vec::new();
                for v in &panel.vendors {
                    let Some(t) = type_of(v) else { continue };
                    for o in v.observations.iter().filter(|o| !o.exited_this_week) {
                        let a = o.age as usize;
                        if counts.len() <= a {
                            counts.resize(a + 1, (0, 0));
                        }
                        counts[a].0 += 1;
                        counts[a].1 += t;
                    }
                }
                for (a, &(n, h)) in counts.iter().enumerate() {
                    let share = h as f64 / n as f64;
                    let sd = (share * (1.0 - share)).sqrt();
                    out.push((name.clone(), a.to_string(), share, sd, n));
                }
            }
        }
    }
    Ok(out)
}

/// Re-solves and re-simulates at every grid value (concurrently) and returns
/// the long-form table in grid order. Failed grid points are flagged rows.
pub fn comparative_statics_sweep(
    spec: &SweepSpec,
    base: &ModelParams,
    space: &StateSpace,
    sim: &SimulationConfig,
    solver: &SolverOptions,
) -> Result<Vec<SweepRow>> {
    if spec.values.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    get_param(base, &spec.parameter)?;
    let point = |value: f64| -> Result<Vec<(String, String, f64, f64, usize)>> {
        let params = with_param(base, &spec.parameter, value)?;
        let model = Model::normal(params, space.clone())?;
        let solution = solve_equilibrium(&model, solver)?;
        let panel = simulate_panel(&solution, &model, sim)?;
        market_metrics(&solution, &model, &panel, &spec.metrics)
    };
    let results: Vec<_> = spec.values.par_iter().map(|&v| (v, point(v))).collect();
    let mut rows = Vec::new();
    for (value, r) in results {
        match r {
            Ok(metrics) => rows.extend(metrics.into_iter().map(|(metric, group, mean, sd, n)| SweepRow {
                parameter: spec.parameter.clone(),
                value,
                metric,
                group,
                mean,
                sd,
                n,
                seed: sim.seed,
                error: String::new(),
            })),
            Err(e) => rows.push(SweepRow {
                parameter: spec.parameter.clone(),
                value,
                metric: String::new(),
                group: String::new(),
                mean: f64::NAN,
                sd: f64::NAN,
                n: 0,
                seed: sim.seed,
                error: e.to_string(),
            }),
        }
    }
    Ok(rows)
}

/// Design of the price regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionSpec {
    pub intercept: bool,
    /// First sales bucket of each group with its own rating slope; empty
    /// means one pooled rating slope. `[0, k]` splits the buckets at `k`.
    pub rating_groups: Vec<usize>,
    /// Dummies for the sales buckets (total-review bins), first omitted.
    pub sales_bins: bool,
    /// Seller age in weeks.
    pub age: bool,
    /// Vendor within-transformation (fixed effects).
    pub fixed_effects: bool,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        RegressionSpec { intercept: true, rating_groups: Vec::new(), sales_bins: false, age: false, fixed_effects: false }
    }
}

impl RegressionSpec {
    /// Rating slopes for the lower and upper halves of `n_buckets` sales
    /// buckets, with bucket dummies.
    pub fn sales_halves(n_buckets: usize) -> Self {
        RegressionSpec { rating_groups: vec![0, n_buckets / 2], sales_bins: true, ..Self::default() }
    }
}

/// OLS coefficients with heteroskedasticity-robust (HC1) standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub robust_se: Vec<f64>,
    pub n_obs: usize,
    /// Absorbed fixed effects (vendors) when the within transformation is used.
    pub n_groups: usize,
    pub r_squared: f64,
    /// Residuals in row order (after the within transformation).
    #[serde(skip)]
    pub residuals: Vec<f64>,
    /// Design matrix used (after the within transformation).
    #[serde(skip)]
    pub design: Option<DMatrix<f64>>,
}

impl RegressionResult {
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        self.names.iter().position(|n| n == name).map(|k| (self.coefficients[k], self.robust_se[k]))
    }
}

/// Least squares of `y` on `x` via column-pivoted QR, with HC1 standard
/// errors (`df_absorbed` extra degrees of freedom are charged for absorbed
/// effects). Collinear columns are named in the error.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String], df_absorbed: usize) -> Result<RegressionResult> {
    let (n, k) = x.shape();
    if k == 0 || n <= k + df_absorbed {
        return Err(Error::InvalidPanel(format!("{n} observations cannot identify {k} coefficients")));
    }
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let scale = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let rank = (0..k).take_while(|&j| r[(j, j)].abs() > 1e-10 * scale.max(f64::MIN_POSITIVE)).count();
    if rank < k {
        // The pivoting moves the dependent columns behind the first `rank`.
        let mut idx = DMatrix::from_fn(1, k, |_, j| j as f64);
        qr.p().permute_columns(&mut idx);
        let order: Vec<usize> = idx.iter().map(|&v| v as usize).collect();
        let dropped = order[rank..].iter().map(|&j| names[j].clone()).collect();
        return Err(Error::RankDeficient(dropped));
    }
    let xtx = x.transpose() * x;
    let chol = xtx.clone().cholesky().ok_or_else(|| Error::RankDeficient(names.to_vec()))?;
    let beta = chol.solve(&(x.transpose() * y));
    let resid = y - x * &beta;
    let inv = chol.inverse();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = x.row(i);
        let e2 = resid[i] * resid[i];
        meat += row.transpose() * row * e2;
    }
    let dof = (n - k - df_absorbed) as f64;
    let cov = &inv * meat * &inv * (n as f64 / dof);
    let ybar = y.mean();
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let rss: f64 = resid.iter().map(|v| v * v).sum();
    Ok(RegressionResult {
        names: names.to_vec(),
        coefficients: beta.iter().copied().collect(),
        robust_se: (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect(),
        n_obs: n,
        n_groups: 0,
        r_squared: if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN },
        residuals: resid.iter().copied().collect(),
        design: Some(x.clone()),
    })
}

/// Regression of log price on rating terms over all rows with a price.
pub fn stylized_fact_regression(panel: &Panel, spec: &RegressionSpec) -> Result<RegressionResult> {
    let rows: Vec<_> = panel
        .vendors
        .iter()
        .flat_map(|v| v.observations.iter().filter_map(move |o| o.price_obs.map(|p| (v.meta.vendor_id, o, p))))
        .collect();
    let mut ratings: Vec<f64> = rows.iter().map(|r| r.1.rating).collect();
    ratings.sort_by(f64::total_cmp);
    ratings.dedup();
    if ratings.len() < 2 {
        return Err(Error::InvalidPanel("need at least two distinct ratings".into()));
    }
    let n_buckets = rows.iter().map(|r| r.1.sales_bucket).max().unwrap_or(0) + 1;
    let groups: Vec<usize> = if spec.rating_groups.is_empty() { vec![0] } else { spec.rating_groups.clone() };
    if groups[0] != 0 || groups.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("rating_groups must start at bucket 0 and increase".into()));
    }
    let group_of = |b: usize| groups.iter().rposition(|&g| g <= b).expect("groups start at 0");
    let mut names = Vec::new();
    if spec.intercept && !spec.fixed_effects {
        names.push("intercept".to_string());
    }
    for (g, &start) in groups.iter().enumerate() {
        names.push(if groups.len() == 1 {
            "rating".to_string()
        } else {
            let end = groups.get(g + 1).map(|e| format!("{}", e - 1)).unwrap_or_else(|| "top".into());
            format!("rating_buckets_{start}_{end}")
        });
    }
    if spec.sales_bins {
        for b in 1..n_buckets {
            names.push(format!("sales_bucket_{b}"));
        }
    }
    if spec.age {
        names.push("age".to_string());
    }
    let k = names.len();
    let n = rows.len();
    let mut x = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    for (i, (_, o, p)) in rows.iter().enumerate() {
        let mut c = 0;
        if spec.intercept && !spec.fixed_effects {
            x[(i, c)] = 1.0;
            c += 1;
        }
        x[(i, c + group_of(o.sales_bucket))] = o.rating;
        c += groups.len();
        if spec.sales_bins {
            if o.sales_bucket > 0 {
                x[(i, c + o.sales_bucket - 1)] = 1.0;
            }
            c += n_buckets - 1;
        }
        if spec.age {
            x[(i, c)] = o.age as f64;
        }
        y[i] = p.ln();
    }
    let mut n_groups = 0;
    if spec.fixed_effects {
        // Demean within vendor; rows are grouped by vendor already.
        let mut start = 0;
        while start < n {
            let id = rows[start].0;
            let end = (start..n).find(|&i| rows[i].0 != id).unwrap_or(n);
            let len = (end - start) as f64;
            for j in 0..k {
                let m = (start..end).map(|i| x[(i, j)]).sum::<f64>() / len;
                for i in start..end {
                    x[(i, j)] -= m;
                }
            }
            let m = (start..end).map(|i| y[i]).sum::<f64>() / len;
            for i in start..end {
                y[i] -= m;
            }
            n_groups += 1;
            start = end;
        }
    }
    let mut result = ols(&x, &y, &names, n_groups)?;
    result.n_groups = n_groups;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_exact_linear_data() {
        let n = 30;
        let x = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64 * 0.1,
            _ => ((i * 7) % 5) as f64,
        });
        let y = DVector::from_fn(n, |i, _| 1.5 - 2.0 * x[(i, 1)] + 0.25 * x[(i, 2)]);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = ols(&x, &y, &names, 0).unwrap();
        for (c, t) in r.coefficients.iter().zip([1.5, -2.0, 0.25]) {
            assert!((c - t).abs() < 1e-10);
        }
    }

    #[test]
    fn collinear_columns_are_named() {
        let x = DMatrix::from_fn(10, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64 + 1.0,
        });
        let y = DVector::from_fn(10, |i, _| i as f64);
        let names: Vec<String> = ["one", "t", "t2"].iter().map(|s| s.to_string()).collect();
        match ols(&x, &y, &names, 0) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols.len(), 1),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_regressors() {
        let x = DMatrix::from_fn(50, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sin() });
        let y = DVector::from_fn(50, |i, _| (i as f64 * 0.37).cos());
        let names: Vec<String> = vec!["c".into(), "s".into()];
        let r = ols(&x, &y, &names, 0).unwrap();
        let e = DVector::from_vec(r.residuals.clone());
        let g = x.transpose() * e;
        assert!(g.amax() < 1e-8);
    }

    #[test]
    fn params_by_name() {
        let p = ModelParams::default();
        assert_eq!(get_param(&p, "alpha").unwrap(), 0.233);
        let q = with_param(&p, "sigma_r", 0.05).unwrap();
        assert_eq!(q.sigma_r, 0.05);
        assert!(with_param(&p, "payoff_variant", 1.0).is_err());
        assert!(with_param(&p, "nope", 1.0).is_err());
        assert!(with_param(&p, "alpha", 2.0).is_err());
    }
}
