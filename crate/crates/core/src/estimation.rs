//! Nested-fixed-point maximum likelihood.
//!
//! Every likelihood evaluation re-solves the stationary equilibrium at the
//! candidate parameters (warm-started from the previous solution) and sums
//! the two-type mixture likelihood of each vendor's observed history. The
//! outer search is Nelder–Mead in transformed, unbounded coordinates;
//! standard errors come from the outer product of per-vendor scores.

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_equilibrium, EquilibriumSolution, SolverOptions};
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, QualityType, StateSpace};
use crate::simulator::{Panel, PanelObservation, VendorHistory};

/// A structural parameter the estimator may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamName {
    ThetaLow,
    ThetaHigh,
    Alpha,
    MuC,
    GammaSales,
    RhoLow,
    RhoHigh,
    Xi,
    SigmaR,
    SigmaP,
}

impl ParamName {
    /// The ten estimated parameters, in reporting order.
    pub const ALL: [ParamName; 10] = [
        ParamName::ThetaLow,
        ParamName::ThetaHigh,
        ParamName::Alpha,
        ParamName::MuC,
        ParamName::GammaSales,
        ParamName::RhoLow,
        ParamName::RhoHigh,
        ParamName::Xi,
        ParamName::SigmaR,
        ParamName::SigmaP,
    ];

    /// Field name in [`ModelParams`].
    pub fn field(self) -> &'static str {
        match self {
            ParamName::ThetaLow => "theta_low",
            ParamName::ThetaHigh => "theta_high",
            ParamName::Alpha => "alpha",
            ParamName::MuC => "mu_c",
            ParamName::GammaSales => "gamma_sales",
            ParamName::RhoLow => "rho_low",
            ParamName::RhoHigh => "rho_high",
            ParamName::Xi => "xi",
            ParamName::SigmaR => "sigma_r",
            ParamName::SigmaP => "sigma_p",
        }
    }

    pub fn get(self, p: &ModelParams) -> f64 {
        match self {
            ParamName::ThetaLow => p.theta_low,
            ParamName::ThetaHigh => p.theta_high,
            ParamName::Alpha => p.alpha,
            ParamName::MuC => p.mu_c,
            ParamName::GammaSales => p.gamma_sales,
            ParamName::RhoLow => p.rho_low,
            ParamName::RhoHigh => p.rho_high,
            ParamName::Xi => p.xi,
            ParamName::SigmaR => p.sigma_r,
            ParamName::SigmaP => p.sigma_p,
        }
    }

    pub fn set(self, p: &mut ModelParams, v: f64) {
        let slot = match self {
            ParamName::ThetaLow => &mut p.theta_low,
            ParamName::ThetaHigh => &mut p.theta_high,
            ParamName::Alpha => &mut p.alpha,
            ParamName::MuC => &mut p.mu_c,
            ParamName::GammaSales => &mut p.gamma_sales,
            ParamName::RhoLow => &mut p.rho_low,
            ParamName::RhoHigh => &mut p.rho_high,
            ParamName::Xi => &mut p.xi,
            ParamName::SigmaR => &mut p.sigma_r,
            ParamName::SigmaP => &mut p.sigma_p,
        };
        *slot = v;
    }

    /// Logit for parameters living in (0, 1), log for scales, identity otherwise.
    pub fn default_transform(self) -> Transform {
        match self {
            ParamName::ThetaLow | ParamName::ThetaHigh | ParamName::Alpha | ParamName::GammaSales | ParamName::Xi => {
                Transform::Logit { lower: 0.0, upper: 1.0 }
            }
            ParamName::SigmaR | ParamName::SigmaP => Transform::Log,
            ParamName::MuC | ParamName::RhoLow | ParamName::RhoHigh => Transform::Identity,
        }
    }
}

/// Map from a parameter's natural domain to the real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// `u = ln x`, for `x > 0`.
    Log,
    /// `u = logit((x − lower)/(upper − lower))`, for `lower < x < upper`.
    Logit { lower: f64, upper: f64 },
}

impl Transform {
    /// Natural → unbounded coordinate; `None` outside the domain.
    pub fn forward(self, x: f64) -> Option<f64> {
        match self {
            Transform::Identity => Some(x),
            Transform::Log => (x > 0.0).then(|| x.ln()),
            Transform::Logit { lower, upper } => {
                let t = (x - lower) / (upper - lower);
                (t > 0.0 && t < 1.0).then(|| (t / (1.0 - t)).ln())
            }
        }
    }

    /// Unbounded → natural coordinate.
    pub fn inverse(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::Logit { lower, upper } => lower + (upper - lower) / (1.0 + (-u).exp()),
        }
    }

    /// `dx/du` at `u` (delta method).
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Log => u.exp(),
            Transform::Logit { lower, upper } => {
                let s = 1.0 / (1.0 + (-u).exp());
                (upper - lower) * s * (1.0 - s)
            }
        }
    }
}

/// A free parameter and its search transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeParameter {
    pub name: ParamName,
    pub transform: Transform,
}

impl FreeParameter {
    pub fn new(name: ParamName) -> Self {
        FreeParameter { name, transform: name.default_transform() }
    }
}

/// Nelder–Mead settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerOptions {
    /// Edge length of the initial simplex in transformed coordinates.
    pub initial_step: f64,
    /// Convergence: spread of simplex function values.
    pub f_tol: f64,
    /// Convergence: largest vertex distance from the best vertex (sup-norm).
    pub x_tol: f64,
    /// Budget of likelihood evaluations (all restarts together).
    pub max_evaluations: usize,
    /// Number of restarts from the incumbent after convergence.
    pub restarts: usize,
    /// Dimension-adapted expansion, contraction and shrink coefficients
    /// (Gao and Han), which keep the simplex from degenerating in higher
    /// dimensions; the classic 1, 2, ½, ½ otherwise.
    pub adaptive: bool,
    /// Evaluations after which an unconverged round is refreshed (0: never).
    pub round_evaluations: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions { initial_step: 0.1, f_tol: 1e-6, x_tol: 1e-5, max_evaluations: 20_000, restarts: 1, adaptive: true, round_evaluations: 2_000 }
    }
}

/// Inner-solver settings used at every likelihood evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerSolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Re-solve from the previous evaluation's equilibrium.
    pub warm_start: bool,
}

impl Default for InnerSolverOptions {
    fn default() -> Self {
        let d = SolverOptions::default();
        InnerSolverOptions { tol: d.tol, max_iter: d.max_iter, damping: d.damping, warm_start: false }
    }
}

/// Everything the estimator needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    /// Values of the fixed parameters (β, σ_c, …) and the default start.
    pub base: ModelParams,
    pub space: StateSpace,
    pub free_parameters: Vec<FreeParameter>,
    #[serde(default)]
    pub inner: InnerSolverOptions,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    /// Relative step of the central differences behind the OPG scores.
    #[serde(default = "default_score_step")]
    pub score_step: f64,
}

fn default_score_step() -> f64 {
    1e-5
}

impl EstimationConfig {
    /// All ten parameters free, default transforms, on the given grid.
    pub fn new(base: ModelParams, space: StateSpace) -> Self {
        EstimationConfig {
            base,
            space,
            free_parameters: ParamName::ALL.iter().map(|&n| FreeParameter::new(n)).collect(),
            inner: InnerSolverOptions::default(),
            optimizer: OptimizerOptions::default(),
            score_step: default_score_step(),
        }
    }

    pub fn with_free(mut self, names: &[ParamName]) -> Self {
        self.free_parameters = names.iter().map(|&n| FreeParameter::new(n)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.free_parameters.is_empty() {
            return Err(Error::Config("at least one parameter must be free".into()));
        }
        for (k, f) in self.free_parameters.iter().enumerate() {
            if self.free_parameters[..k].iter().any(|g| g.name == f.name) {
                return Err(Error::Config(format!("`{}` listed twice", f.name.field())));
            }
            if let Transform::Logit { lower, upper } = f.transform {
                if !(lower < upper) {
                    return Err(Error::Config(format!("`{}`: logit bounds must satisfy lower < upper", f.name.field())));
                }
            }
        }
        if !(self.score_step > 0.0) {
            return Err(Error::param("score_step", "must be positive"));
        }
        Ok(())
    }

    /// Transformed coordinates of the free parameters of `p`.
    pub fn to_unbounded(&self, p: &ModelParams) -> Result<Vec<f64>> {
        self.free_parameters
            .iter()
            .map(|f| {
                let x = f.name.get(p);
                f.transform
                    .forward(x)
                    .ok_or_else(|| Error::param(f.name.field(), format!("{x} lies outside the transform's domain")))
            })
            .collect()
    }

    /// A start point displaced from `p` in transformed coordinates.
    ///
    /// Free parameter `k` moves by `fraction · max(|u_k|, 0.1)`, downwards for
    /// even `k` and upwards for odd `k`, so that the start is away from `p` in
    /// every coordinate at once without sliding along a single direction.
    pub fn perturbed_start(&self, p: &ModelParams, fraction: f64) -> Result<ModelParams> {
        let u = self.to_unbounded(p)?;
        let moved: Vec<f64> = u
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let d = fraction * x.abs().max(0.1);
                if k % 2 == 1 {
                    x + d
                } else {
                    x - d
                }
            })
            .collect();
        Ok(self.from_unbounded(&moved))
    }

    /// Parameters with the free entries set from transformed coordinates.
    pub fn from_unbounded(&self, u: &[f64]) -> ModelParams {
        let mut p = self.base.clone();
        for (f, &ui) in self.free_parameters.iter().zip(u) {
            f.name.set(&mut p, f.transform.inverse(ui));
        }
        p
    }
}

/// What the likelihood needs from a solved model.
pub trait LikelihoodInputs {
    /// Initial-state probability `η(ω)` for an entrant of the type.
    fn initial_prob(&self, ty: QualityType, state: usize) -> f64;
    /// `F(c̄_θ(ω))`.
    fn survival(&self, ty: QualityType, state: usize) -> f64;
    /// `1 − F(c̄_θ(ω))`.
    fn exit(&self, ty: QualityType, state: usize) -> f64;
    /// `Π_θ(ω, ω′)`.
    fn transition(&self, ty: QualityType, from: usize, to: usize) -> f64;
    /// `log φ(p; θ̂(ω))`.
    fn log_price_density(&self, price: f64, state: usize) -> f64;
    /// Prior weight of the high type.
    fn high_share(&self) -> f64;
}

/// Likelihood inputs from a model and its equilibrium.
pub struct SolvedModel<'a> {
    pub model: &'a Model,
    pub solution: &'a EquilibriumSolution,
}

impl LikelihoodInputs for SolvedModel<'_> {
    fn initial_prob(&self, ty: QualityType, state: usize) -> f64 {
        self.model.entry.initial_prob(ty, state)
    }
    fn survival(&self, ty: QualityType, state: usize) -> f64 {
        self.solution.survival[ty.index()][state]
    }
    fn exit(&self, ty: QualityType, state: usize) -> f64 {
        self.solution.exit_prob[ty.index()][state]
    }
    fn transition(&self, ty: QualityType, from: usize, to: usize) -> f64 {
        self.model.kernel.prob(ty, from, to)
    }
    fn log_price_density(&self, price: f64, state: usize) -> f64 {
        let p = &self.model.params;
        p.price_noise.log_density(price, self.solution.beliefs.theta_hat[state], p.sigma_p)
    }
    fn high_share(&self) -> f64 {
        self.model.params.alpha
    }
}

/// Log-likelihood of one vendor's history conditional on its type.
///
/// Every week without exit contributes `F(c̄)·φ(p)`, the exit week `1 − F(c̄)`,
/// and each move between consecutive weeks `Π_θ(ω, ω′)`; the first week adds
/// `η(ω₁)`. A zero-probability transition gives `−∞`.
pub fn vendor_loglik_conditional<L: LikelihoodInputs + ?Sized>(
    observations: &[PanelObservation],
    ty: QualityType,
    inputs: &L,
) -> f64 {
    let Some(first) = observations.first() else {
        return 0.0;
    };
    let mut ll = inputs.initial_prob(ty, first.state_index).ln();
    for (k, o) in observations.iter().enumerate() {
        if k > 0 {
            let prev = observations[k - 1].state_index;
            let p = inputs.transition(ty, prev, o.state_index);
            if p <= 0.0 {
                log::debug!(
                    "vendor {}: transition {} -> {} has zero probability for the {} type",
                    o.vendor_id,
                    prev,
                    o.state_index,
                    ty.label()
                );
                return f64::NEG_INFINITY;
            }
            ll += p.ln();
        }
        match o.price_obs {
            Some(price) if !o.exited_this_week => {
                ll += inputs.survival(ty, o.state_index).ln() + inputs.log_price_density(price, o.state_index);
            }
            _ => ll += inputs.exit(ty, o.state_index).ln(),
        }
    }
    ll
}

/// `log[α·exp(ℓ_high) + (1 − α)·exp(ℓ_low)]` without under- or overflow.
pub fn log_mixture(alpha: f64, ll_high: f64, ll_low: f64) -> f64 {
    let a = if alpha > 0.0 { alpha.ln() + ll_high } else { f64::NEG_INFINITY };
    let b = if alpha < 1.0 { (1.0 - alpha).ln() + ll_low } else { f64::NEG_INFINITY };
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Two-type mixture log-likelihood of one vendor.
pub fn mixture_vendor_loglik<L: LikelihoodInputs + ?Sized>(observations: &[PanelObservation], inputs: &L) -> f64 {
    let hi = vendor_loglik_conditional(observations, QualityType::High, inputs);
    let lo = vendor_loglik_conditional(observations, QualityType::Low, inputs);
    log_mixture(inputs.high_share(), hi, lo)
}

/// Correctly rounded sum (Shewchuk's exact partials), so totals do not depend
/// on summation order.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    let mut special = 0.0;
    for mut x in values {
        if !x.is_finite() {
            special += x;
            continue;
        }
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    if special != 0.0 || special.is_nan() {
        return special;
    }
    // Round the exact sum of the non-overlapping partials, as Python's fsum does.
    let mut n = partials.len();
    let mut hi = 0.0;
    if n > 0 {
        n -= 1;
        hi = partials[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = partials[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
    }
    hi
}

/// Vendors usable for estimation, sorted by id, plus what was dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationData {
    pub vendors: Vec<VendorHistory>,
    /// Vendors that entered and exited in the same observed week.
    pub excluded_same_week_exit: usize,
    /// Vendors whose first observed state is not an entry state.
    pub excluded_initial_state: usize,
}

impl EstimationData {
    /// Validates the panel against the grid and applies the sample rules.
    pub fn prepare(panel: &Panel, space: &StateSpace) -> Result<Self> {
        panel.validate_against(space)?;
        let entry = space.entry_state();
        let mut vendors = Vec::with_capacity(panel.vendors.len());
        let (mut same_week, mut initial) = (0, 0);
        for v in &panel.vendors {
            let Some(first) = v.observations.first() else { continue };
            if first.state_index != entry {
                initial += 1;
            } else if v.observations.len() == 1 && first.exited_this_week {
                same_week += 1;
            } else {
                vendors.push(v.clone());
            }
        }
        vendors.sort_by_key(|v| v.meta.vendor_id);
        if vendors.windows(2).any(|w| w[0].meta.vendor_id == w[1].meta.vendor_id) {
            return Err(Error::InvalidPanel("duplicate vendor ids".into()));
        }
        Ok(EstimationData { vendors, excluded_same_week_exit: same_week, excluded_initial_state: initial })
    }

    pub fn n_vendors(&self) -> usize {
        self.vendors.len()
    }

    pub fn n_observations(&self) -> usize {
        self.vendors.iter().map(|v| v.observations.len()).sum()
    }
}

/// Per-vendor mixture log-likelihoods, in vendor order.
pub fn vendor_logliks<L: LikelihoodInputs + Sync>(data: &EstimationData, inputs: &L) -> Vec<f64> {
    data.vendors.par_iter().map(|v| mixture_vendor_loglik(&v.observations, inputs)).collect()
}

/// The NFXP objective with its bookkeeping.
pub struct Likelihood<'a> {
    pub data: &'a EstimationData,
    pub config: &'a EstimationConfig,
    last: Mutex<Option<EquilibriumSolution>>,
    evaluations: Mutex<(usize, usize)>,
}

impl<'a> Likelihood<'a> {
    pub fn new(data: &'a EstimationData, config: &'a EstimationConfig) -> Self {
        Likelihood { data, config, last: Mutex::new(None), evaluations: Mutex::new((0, 0)) }
    }

    /// (evaluations, inner failures) so far.
    pub fn counts(&self) -> (usize, usize) {
        *self.evaluations.lock().expect("counter lock")
    }

    /// Solves the equilibrium at `params`.
    pub fn solve(&self, params: &ModelParams) -> Result<(Model, EquilibriumSolution)> {
        let model = Model::normal(params.clone(), self.config.space.clone())?;
        let inner = &self.config.inner;
        let warm = if inner.warm_start { self.last.lock().expect("warm-start lock").clone() } else { None };
        let opts = SolverOptions {
            tol: inner.tol,
            max_iter: inner.max_iter,
            damping: inner.damping,
            warm_start: warm,
            enforce_assumptions: false,
        };
        let sol = solve_equilibrium(&model, &opts)?;
        if inner.warm_start {
            *self.last.lock().expect("warm-start lock") = Some(sol.clone());
        }
        Ok((model, sol))
    }

    /// Per-vendor log-likelihoods at `params`; `None` when the inner solve fails
    /// or the parameters are invalid.
    pub fn per_vendor(&self, params: &ModelParams) -> Option<Vec<f64>> {
        let solved = self.solve(params);
        let mut c = self.evaluations.lock().expect("counter lock");
        c.0 += 1;
        match solved {
            Ok((model, solution)) => {
                drop(c);
                Some(vendor_logliks(self.data, &SolvedModel { model: &model, solution: &solution }))
            }
            Err(e) => {
                c.1 += 1;
                log::debug!("likelihood evaluation rejected: {e}");
                None
            }
        }
    }

    /// Total log-likelihood; `−∞` when the inner solve fails.
    pub fn total(&self, params: &ModelParams) -> f64 {
        match self.per_vendor(params) {
            Some(v) => exact_sum(v),
            None => f64::NEG_INFINITY,
        }
    }

    /// Total log-likelihood at transformed coordinates.
    pub fn total_unbounded(&self, u: &[f64]) -> f64 {
        self.total(&self.config.from_unbounded(u))
    }
}

/// Solves the equilibrium at `params` and sums the vendors' mixture
/// log-likelihoods; `−∞` when the inner solve fails.
pub fn total_loglik(data: &EstimationData, params: &ModelParams, config: &EstimationConfig) -> f64 {
    Likelihood::new(data, config).total(params)
}

/// Outcome of a Nelder–Mead search (maximization).
#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub restarts_used: usize,
    pub refreshes: usize,
}

/// Maximizes `f` with the Nelder–Mead simplex method, restarting from the
/// incumbent `options.restarts` times after convergence (stopping early when a
/// restart finds nothing better). A round that uses up
/// `options.round_evaluations` without converging is replaced by a fresh
/// simplex around its best vertex, which undoes simplex degeneracy on narrow
/// ridges; such refreshes do not count as restarts. Non-finite values are
/// treated as `−∞` and never accepted over finite ones.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], options: &OptimizerOptions) -> NelderMeadResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = -f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let (expand, contract, shrink) = if options.adaptive && n > 1 {
        let nf = n as f64;
        (1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf)
    } else {
        (2.0, 0.5, 0.5)
    };
    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0, &mut evals);
    let mut converged;
    let mut restarts_used = 0;
    let mut refreshes = 0;
    loop {
        let round_start = evals;
        let mut simplex: Vec<(Vec<f64>, f64)> = vec![(best_x.clone(), best_f)];
        for i in 0..n {
            let mut x = best_x.clone();
            x[i] += options.initial_step;
            let fx = eval(&x, &mut evals);
            simplex.push((x, fx));
        }
        converged = false;
        let mut capped = false;
        while evals < options.max_evaluations {
            if options.round_evaluations > 0 && evals - round_start >= options.round_evaluations {
                capped = true;
                break;
            }
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let f_spread = simplex[n].1 - simplex[0].1;
            let x_spread = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if f_spread.is_finite() && f_spread < options.f_tol && x_spread < options.x_tol {
                converged = true;
                break;
            }
            let centroid: Vec<f64> =
                (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
            let worst = simplex[n].clone();
            let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (worst.0[j] - centroid[j])).collect() };
            let xr = along(-1.0);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(-expand);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let xc = if fr < worst.1 { along(-contract) } else { along(contract) };
                let fc = eval(&xc, &mut evals);
                if fc < fr.min(worst.1) {
                    simplex[n] = (xc, fc);
                } else {
                    let x0 = simplex[0].0.clone();
                    for v in simplex.iter_mut().skip(1) {
                        let xs: Vec<f64> = x0.iter().zip(&v.0).map(|(a, b)| a + shrink * (b - a)).collect();
                        let fs = eval(&xs, &mut evals);
                        *v = (xs, fs);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let improved = best_f - simplex[0].1 > options.f_tol;
        if simplex[0].1 <= best_f {
            best_x = simplex[0].0.clone();
            best_f = simplex[0].1;
        }
        if capped {
            refreshes += 1;
            continue;
        }
        // A restart that finds nothing better confirms the optimum.
        let confirmed = restarts_used > 0 && !improved;
        if !converged || confirmed || restarts_used >= options.restarts {
            break;
        }
        restarts_used += 1;
    }
    NelderMeadResult { x: best_x, value: -best_f, evaluations: evals, converged, restarts_used, refreshes }
}

/// One free parameter's estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: ParamName,
    pub value: f64,
    /// OPG standard error; `None` when the score matrix is singular in this direction.
    pub standard_error: Option<f64>,
}

/// OPG standard errors with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpgReport {
    /// Per free parameter, in natural units.
    pub standard_errors: Vec<Option<f64>>,
    /// Per free parameter: true where the OPG matrix was rank-deficient and
    /// the pseudo-inverse was used.
    pub singular: Vec<bool>,
    pub used_pseudo_inverse: bool,
    /// Eigenvalues of the OPG matrix (transformed coordinates), ascending.
    pub opg_eigenvalues: Vec<f64>,
}

/// Per-vendor scores in transformed coordinates by central differences.
pub fn vendor_scores(lik: &Likelihood<'_>, u: &[f64]) -> Result<DMatrix<f64>> {
    let k = u.len();
    let n = lik.data.n_vendors();
    let mut scores = DMatrix::zeros(n, k);
    for j in 0..k {
        let h = lik.config.score_step * u[j].abs().max(1.0);
        let mut up = u.to_vec();
        let mut down = u.to_vec();
        up[j] += h;
        down[j] -= h;
        let fu = lik.per_vendor(&lik.config.from_unbounded(&up));
        let fd = lik.per_vendor(&lik.config.from_unbounded(&down));
        let (Some(fu), Some(fd)) = (fu, fd) else {
            return Err(Error::Infeasible(format!(
                "inner solve failed while differencing `{}`",
                lik.config.free_parameters[j].name.field()
            )));
        };
        for i in 0..n {
            scores[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    Ok(scores)
}

/// Norm of a parameter's projection on the dropped OPG directions above which
/// it is flagged as singular.
const NULL_LOADING: f64 = 1e-3;

/// Standard errors from scores `g_i` (rows of `scores`, transformed
/// coordinates): covariance `(Σ g_i g_iᵀ)⁻¹`, mapped to natural units with the
/// transform derivatives `jac`.
pub fn opg_from_scores(scores: &DMatrix<f64>, jac: &[f64]) -> OpgReport {
    let k = scores.ncols();
    let opg = scores.transpose() * scores;
    let eig = opg.clone().symmetric_eigen();
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let max_eig = eigenvalues.last().copied().unwrap_or(0.0).max(0.0);
    let cutoff = max_eig * 1e-12 * k as f64;
    let full_rank = eigenvalues.first().is_some_and(|&l| l > cutoff);
    let mut singular = vec![false; k];
    let cov = if full_rank {
        opg.clone().try_inverse()
    } else {
        None
    };
    let used_pseudo_inverse = cov.is_none();
    let cov = cov.unwrap_or_else(|| {
        // Pseudo-inverse on the well-determined eigen-directions. A parameter
        // whose unit vector has a material component in the dropped subspace
        // is not identified from the scores and gets no standard error.
        let mut c = DMatrix::zeros(k, k);
        let mut null_weight = vec![0.0; k];
        for (idx, &l) in eig.eigenvalues.iter().enumerate() {
            let v: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
            if l > cutoff {
                c += &v * v.transpose() / l;
            } else {
                for j in 0..k {
                    null_weight[j] += v[j] * v[j];
                }
            }
        }
        for j in 0..k {
            singular[j] = null_weight[j].sqrt() > NULL_LOADING;
        }
        c
    });
    let standard_errors = (0..k)
        .map(|j| {
            let var = cov[(j, j)];
            (!singular[j] && var > 0.0 && var.is_finite()).then(|| jac[j].abs() * var.sqrt())
        })
        .collect();
    OpgReport { standard_errors, singular, used_pseudo_inverse, opg_eigenvalues: eigenvalues }
}

/// OPG standard errors at `estimates` (natural units).
pub fn opg_standard_errors(data: &EstimationData, estimates: &ModelParams, config: &EstimationConfig) -> Result<OpgReport> {
    config.validate()?;
    let lik = Likelihood::new(data, config);
    let u = config.to_unbounded(estimates)?;
    let scores = vendor_scores(&lik, &u)?;
    let jac: Vec<f64> = config.free_parameters.iter().zip(&u).map(|(f, &ui)| f.transform.derivative(ui)).collect();
    Ok(opg_from_scores(&scores, &jac))
}

/// Result of [`maximize_likelihood`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub point_estimates: ModelParams,
    pub estimates: Vec<ParameterEstimate>,
    pub loglik: f64,
    pub start_loglik: f64,
    pub n_vendors: usize,
    pub n_obs: usize,
    pub excluded_same_week_exit: usize,
    pub excluded_initial_state: usize,
    pub converged: bool,
    pub evaluation_count: usize,
    pub inner_failures: usize,
    pub restarts_used: usize,
    pub simplex_refreshes: usize,
    pub opg: Option<OpgReport>,
    /// Why standard errors are missing, if they are.
    pub opg_error: Option<String>,
}

impl EstimationResult {
    pub fn estimate(&self, name: ParamName) -> Option<&ParameterEstimate> {
        self.estimates.iter().find(|e| e.name == name)
    }
}

/// One line of a recovery comparison between estimates and known truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub name: ParamName,
    pub truth: f64,
    pub estimate: f64,
    pub standard_error: Option<f64>,
    pub abs_error: f64,
    pub rel_error: f64,
    /// Allowed error: the larger of `se_multiple · SE` and `rel_tolerance · |truth|`.
    pub tolerance: f64,
    pub recovered: bool,
}

/// Compares the estimates with the values that generated the data. A
/// missing standard error contributes no allowance.
pub fn recovery_table(result: &EstimationResult, truth: &ModelParams, se_multiple: f64, rel_tolerance: f64) -> Vec<RecoveryRow> {
    result
        .estimates
        .iter()
        .map(|e| {
            let t = e.name.get(truth);
            let abs_error = (e.value - t).abs();
            let tolerance = (se_multiple * e.standard_error.unwrap_or(0.0)).max(rel_tolerance * t.abs());
            RecoveryRow {
                name: e.name,
                truth: t,
                estimate: e.value,
                standard_error: e.standard_error,
                abs_error,
                rel_error: abs_error / t.abs(),
                tolerance,
                recovered: abs_error <= tolerance,
            }
        })
        .collect()
}

/// Maximizes the likelihood from `start` (the config's base values when
/// `None`) and attaches OPG standard errors.
pub fn maximize_likelihood(panel: &Panel, config: &EstimationConfig, start: Option<&ModelParams>) -> Result<EstimationResult> {
    config.validate()?;
    let data = EstimationData::prepare(panel, &config.space)?;
    if data.n_vendors() == 0 {
        return Err(Error::InvalidPanel("no usable vendors".into()));
    }
    let start = start.unwrap_or(&config.base);
    let u0 = config.to_unbounded(start)?;
    let lik = Likelihood::new(&data, config);
    let start_loglik = lik.total_unbounded(&u0);
    if !start_loglik.is_finite() {
        return Err(Error::Infeasible(format!("log-likelihood at the starting point is {start_loglik}")));
    }
    let nm = nelder_mead(|u| lik.total_unbounded(u), &u0, &config.optimizer);
    let point_estimates = config.from_unbounded(&nm.x);
    let (evaluation_count, inner_failures) = lik.counts();
    let scores = vendor_scores(&lik, &nm.x);
    let (opg, opg_error) = match scores {
        Ok(s) => {
            let jac: Vec<f64> =
                config.free_parameters.iter().zip(&nm.x).map(|(f, &ui)| f.transform.derivative(ui)).collect();
            (Some(opg_from_scores(&s, &jac)), None)
        }
        Err(e) => (None, Some(e.to_string())),
    };
    let estimates = config
        .free_parameters
        .iter()
        .enumerate()
        .map(|(j, f)| ParameterEstimate {
            name: f.name,
            value: f.name.get(&point_estimates),
            standard_error: opg.as_ref().and_then(|o| o.standard_errors[j]),
        })
        .collect();
    Ok(EstimationResult {
        point_estimates,
        estimates,
        loglik: nm.value,
        start_loglik,
        n_vendors: data.n_vendors(),
        n_obs: data.n_observations(),
        excluded_same_week_exit: data.excluded_same_week_exit,
        excluded_initial_state: data.excluded_initial_state,
        converged: nm.converged,
        evaluation_count,
        inner_failures,
        restarts_used: nm.restarts_used,
        simplex_refreshes: nm.refreshes,
        opg,
        opg_error,
    })
}
