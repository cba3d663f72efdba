//! The run configuration document.
//!
//! A configuration is a JSON object with a `schema_version`, one key per
//! model parameter (any omitted parameter keeps its default) and optional
//! sections:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "theta_low": 0.3, "theta_high": 0.525, "alpha": 0.233,
//!   "grid": { "preset": "estimation" },
//!   "cost": "normal",
//!   "solver": { "tol": 1e-10, "max_iter": 10000, "damping": 0.5 },
//!   "simulation": { "n_vendors": 2000, "horizon_weeks": 85 },
//!   "estimation": { "free": ["theta_low", "alpha"], "start": { "alpha": 0.3 } },
//!   "dollars": { "dollars_per_gram": 35, "grams_per_order": 20 },
//!   "recovery": { "perturbation": 0.2 }
//! }
//! ```
//!
//! Unknown keys are rejected at every level.

use std::collections::BTreeMap;
use std::path::Path;

use ratingeq::analysis::DollarScale;
use ratingeq::equilibrium::SolverOptions;
use ratingeq::estimation::{EstimationConfig, FreeParameter, InnerSolverOptions, OptimizerOptions, ParamName, Transform};
use ratingeq::model::{CostDistribution, Model, ModelParams, RatingGrid, SalesGrid, StateSpace};
use ratingeq::simulator::SimulationConfig;
use ratingeq::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// The only schema version this build reads.
pub const SCHEMA_VERSION: u32 = 1;

/// Keys of the configuration object that are sections rather than parameters.
const SECTIONS: [&str; 8] = ["grid", "cost", "solver", "simulation", "estimation", "dollars", "recovery", "uniqueness"];

/// Named state-space grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    /// 51 ratings on [3, 5] × 10 sales buckets.
    Default,
    /// 21 ratings on [3, 5] × 6 sales buckets.
    Estimation,
}

/// State-space grid: a preset, optionally overridden field by field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub preset: Option<GridPreset>,
    pub rating_min: Option<f64>,
    pub rating_max: Option<f64>,
    pub rating_points: Option<usize>,
    /// Explicit rating levels; excludes the three fields above.
    pub rating_values: Option<Vec<f64>>,
    /// Lower edges of the sales buckets, starting at 0.
    pub sales_edges: Option<Vec<u64>>,
}

impl GridSpec {
    pub fn build(&self) -> Result<StateSpace> {
        let (min, max, points, edges) = match self.preset.unwrap_or(GridPreset::Default) {
            GridPreset::Default => (3.0, 5.0, 51, SalesGrid::default_buckets()),
            GridPreset::Estimation => (3.0, 5.0, 21, SalesGrid::estimation_buckets()),
        };
        let rating = match &self.rating_values {
            Some(values) => {
                if self.rating_min.is_some() || self.rating_max.is_some() || self.rating_points.is_some() {
                    return Err(Error::Config(
                        "grid: `rating_values` cannot be combined with rating_min/rating_max/rating_points".into(),
                    ));
                }
                RatingGrid::new(values.clone())?
            }
            None => RatingGrid::evenly_spaced(
                self.rating_min.unwrap_or(min),
                self.rating_max.unwrap_or(max),
                self.rating_points.unwrap_or(points),
            )?,
        };
        let sales = match &self.sales_edges {
            Some(e) => SalesGrid::new(e.clone())?,
            None => edges,
        };
        Ok(StateSpace::new(rating, sales))
    }
}

/// Cost-shock family; the normal law takes `mu_c` and `sigma_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostFamily {
    #[default]
    Normal,
    Uniform01,
}

/// Equilibrium solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    pub enforce_assumptions: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverOptions::default();
        SolverSection { tol: d.tol, max_iter: d.max_iter, damping: d.damping, enforce_assumptions: d.enforce_assumptions }
    }
}

impl SolverSection {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            damping: self.damping,
            warm_start: None,
            enforce_assumptions: self.enforce_assumptions,
        }
    }
}

/// Panel simulation settings; the seed comes from the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub n_vendors: usize,
    pub horizon_weeks: u32,
    pub staggered_entry: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection { n_vendors: 2000, horizon_weeks: 85, staggered_entry: true }
    }
}

impl SimulationSection {
    pub fn config(&self, seed: u64) -> SimulationConfig {
        SimulationConfig {
            n_vendors: self.n_vendors,
            horizon_weeks: self.horizon_weeks,
            seed,
            staggered_entry: self.staggered_entry,
        }
    }
}

/// Likelihood maximization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    /// Free parameters, in search order.
    pub free: Vec<ParamName>,
    /// Transform overrides for individual free parameters.
    pub transforms: BTreeMap<ParamName, Transform>,
    pub inner: InnerSolverOptions,
    pub optimizer: OptimizerOptions,
    pub score_step: f64,
    /// Start values overriding the model parameters.
    pub start: Map<String, Value>,
}

impl Default for EstimationSection {
    fn default() -> Self {
        EstimationSection {
            free: ParamName::ALL.to_vec(),
            transforms: BTreeMap::new(),
            inner: InnerSolverOptions::default(),
            optimizer: OptimizerOptions::default(),
            score_step: 1e-5,
            start: Map::new(),
        }
    }
}

/// Settings of the simulate → estimate → compare workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverySection {
    /// Relative displacement of the start in transformed coordinates.
    pub perturbation: f64,
    /// An estimate counts as recovered within this many standard errors…
    pub se_multiple: f64,
    /// …or within this relative error of the truth.
    pub relative_tolerance: f64,
}

impl Default for RecoverySection {
    fn default() -> Self {
        RecoverySection { perturbation: 0.2, se_multiple: 3.0, relative_tolerance: 0.1 }
    }
}

/// Uniqueness verification settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniquenessSection {
    /// Default β grid for `eq beta-bar` as `start:end:points`.
    pub beta_grid: String,
}

impl Default for UniquenessSection {
    fn default() -> Self {
        UniquenessSection { beta_grid: "0.90:0.999:25".into() }
    }
}

/// A parsed and validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: ModelParams,
    pub grid: GridSpec,
    pub cost: CostFamily,
    pub solver: SolverSection,
    pub simulation: SimulationSection,
    pub estimation: EstimationSection,
    pub dollars: DollarScale,
    pub recovery: RecoverySection,
    pub uniqueness: UniquenessSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            params: ModelParams::default(),
            grid: GridSpec::default(),
            cost: CostFamily::default(),
            solver: SolverSection::default(),
            simulation: SimulationSection::default(),
            estimation: EstimationSection::default(),
            dollars: DollarScale::default(),
            recovery: RecoverySection::default(),
            uniqueness: UniquenessSection::default(),
        }
    }
}

fn section<T: for<'de> Deserialize<'de> + Default>(map: &mut Map<String, Value>, key: &str) -> Result<T> {
    match map.remove(key) {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("section `{key}`: {e}"))),
    }
}

impl RunConfig {
    /// Parses a configuration document.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        let Value::Object(mut map) = value else {
            return Err(Error::Config("the configuration must be a JSON object".into()));
        };
        match map.remove("schema_version") {
            Some(Value::Number(n)) if n.as_u64() == Some(u64::from(SCHEMA_VERSION)) => {}
            Some(other) => {
                return Err(Error::Config(format!("unsupported schema_version {other}; this build reads {SCHEMA_VERSION}")))
            }
            None => return Err(Error::Config("missing `schema_version`".into())),
        }
        let cfg = RunConfig {
            grid: section(&mut map, "grid")?,
            cost: section(&mut map, "cost")?,
            solver: section(&mut map, "solver")?,
            simulation: section(&mut map, "simulation")?,
            estimation: section(&mut map, "estimation")?,
            dollars: section(&mut map, "dollars")?,
            recovery: section(&mut map, "recovery")?,
            uniqueness: section(&mut map, "uniqueness")?,
            params: serde_json::from_value(Value::Object(map))
                .map_err(|e| Error::Config(format!("model parameters: {e}")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.grid.build()?;
        self.estimation_config()?.validate()?;
        self.start_params()?;
        Ok(())
    }

    /// Canonical JSON form: every key spelled out, keys sorted.
    pub fn canonical_value(&self) -> Value {
        let mut map = match serde_json::to_value(&self.params).expect("parameters serialize") {
            Value::Object(m) => m,
            _ => unreachable!("parameters serialize to an object"),
        };
        let mut put = |k: &str, v: Value| {
            map.insert(k.to_string(), v);
        };
        put("schema_version", Value::from(SCHEMA_VERSION));
        put("grid", serde_json::to_value(&self.grid).expect("serializable"));
        put("cost", serde_json::to_value(self.cost).expect("serializable"));
        put("solver", serde_json::to_value(&self.solver).expect("serializable"));
        put("simulation", serde_json::to_value(&self.simulation).expect("serializable"));
        put("estimation", serde_json::to_value(&self.estimation).expect("serializable"));
        put("dollars", serde_json::to_value(&self.dollars).expect("serializable"));
        put("recovery", serde_json::to_value(&self.recovery).expect("serializable"));
        put("uniqueness", serde_json::to_value(&self.uniqueness).expect("serializable"));
        debug_assert!(SECTIONS.iter().all(|s| map.contains_key(*s)));
        Value::Object(map)
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        let text = ratingeq::numfmt::to_json_string(&self.canonical_value()).expect("serializable");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn space(&self) -> Result<StateSpace> {
        self.grid.build()
    }

    pub fn cost_distribution(&self, params: &ModelParams) -> Result<CostDistribution> {
        match self.cost {
            CostFamily::Normal => params.normal_cost(),
            CostFamily::Uniform01 => Ok(CostDistribution::Uniform01),
        }
    }

    /// The model at the configured parameters.
    pub fn model(&self) -> Result<Model> {
        self.model_at(&self.params)
    }

    /// The model at other parameter values, on the configured grid and cost family.
    pub fn model_at(&self, params: &ModelParams) -> Result<Model> {
        Model::from_params(params.clone(), self.space()?, self.cost_distribution(params)?)
    }

    pub fn estimation_config(&self) -> Result<EstimationConfig> {
        if self.cost != CostFamily::Normal {
            return Err(Error::Config("estimation supports the normal cost family only".into()));
        }
        let est = &self.estimation;
        for name in est.transforms.keys() {
            if !est.free.contains(name) {
                return Err(Error::Config(format!("transform given for `{}`, which is not free", name.field())));
            }
        }
        let mut cfg = EstimationConfig::new(self.params.clone(), self.space()?);
        cfg.free_parameters = est
            .free
            .iter()
            .map(|&n| FreeParameter { name: n, transform: est.transforms.get(&n).copied().unwrap_or(n.default_transform()) })
            .collect();
        cfg.inner = est.inner.clone();
        cfg.optimizer = est.optimizer.clone();
        cfg.score_step = est.score_step;
        Ok(cfg)
    }

    /// Start of the likelihood search: the model parameters with the
    /// `estimation.start` overrides applied.
    pub fn start_params(&self) -> Result<ModelParams> {
        let mut v = serde_json::to_value(&self.params).expect("parameters serialize");
        let obj = v.as_object_mut().expect("object");
        for (k, x) in &self.estimation.start {
            if !obj.contains_key(k) {
                return Err(Error::Config(format!("estimation.start: unknown parameter `{k}`")));
            }
            obj.insert(k.clone(), x.clone());
        }
        let p: ModelParams =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("estimation.start: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

/// Parses `start:end:points` into an evenly spaced grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("grid `{spec}` must read start:end:points"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n).map(|k| if k == n - 1 { b } else { a + (b - a) * k as f64 / (n - 1) as f64 }).collect())
}
