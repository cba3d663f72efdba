//! Weekly vendor panels simulated from a stationary equilibrium.
//!
//! Every vendor owns an independent random stream (the master seed with the
//! vendor id as stream number), so a panel is bit-identical regardless of
//! thread count or simulation order. Each week an active vendor first faces
//! its cost shock: it exits when the shock exceeds its cutoff (the row records
//! the state and no price), otherwise it sells at the noisy price and moves
//! through its type's kernel. Vendors still active in the closing week are
//! censored.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::EquilibriumSolution;
use crate::error::{Error, Result};
use crate::model::{Model, QualityType, StateSpace};
use crate::numfmt::{format_g17, to_json_string};

/// Ratings at or above this value count as "high" in the survival moments.
pub const HIGH_RATING: f64 = 4.95;
/// Vendors younger than this many weeks (50 days) count as young.
pub const YOUNG_WEEKS: u32 = 7;
/// CSV header of a panel file.
pub const PANEL_HEADER: [&str; 8] =
    ["vendor_id", "week", "age", "state_index", "rating", "sales_bucket", "price_obs", "exited"];

/// Size, horizon and seed of a simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_vendors: usize,
    /// Market closure week `W`; weeks are numbered `1..=W`.
    #[serde(default = "default_horizon")]
    pub horizon_weeks: u32,
    #[serde(default)]
    pub seed: u64,
    /// Entry week uniform on `1..=W` (true) or week 1 for everybody (false).
    #[serde(default = "default_true")]
    pub staggered_entry: bool,
}

fn default_horizon() -> u32 {
    85
}

fn default_true() -> bool {
    true
}

impl SimulationConfig {
    pub fn new(n_vendors: usize, horizon_weeks: u32, seed: u64) -> Self {
        SimulationConfig { n_vendors, horizon_weeks, seed, staggered_entry: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vendors == 0 {
            return Err(Error::param("n_vendors", "must be at least 1"));
        }
        if self.horizon_weeks == 0 {
            return Err(Error::param("horizon_weeks", "must be at least 1"));
        }
        Ok(())
    }
}

/// One vendor-week.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelObservation {
    pub vendor_id: u64,
    /// Calendar week.
    pub week: u32,
    /// Weeks since entry (0 in the entry week).
    pub age: u32,
    pub state_index: usize,
    pub rating: f64,
    pub sales_bucket: usize,
    /// Observed price; absent in the week the vendor exits.
    pub price_obs: Option<f64>,
    pub exited_this_week: bool,
}

/// Per-vendor metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VendorMeta {
    pub vendor_id: u64,
    pub entry_week: u32,
    /// Still active at market closure.
    pub censored: bool,
    /// Simulated quality; kept for validation and never read by the estimator.
    pub true_type: Option<QualityType>,
}

/// A vendor's metadata and its age-ordered observations.
#[derive(Debug, Clone, PartialEq)]
pub struct VendorHistory {
    pub meta: VendorMeta,
    pub observations: Vec<PanelObservation>,
}

impl VendorHistory {
    pub fn exited(&self) -> bool {
        self.observations.last().is_some_and(|o| o.exited_this_week)
    }
}

/// Observations grouped by vendor, in ascending vendor id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Panel {
    pub vendors: Vec<VendorHistory>,
}

impl Panel {
    pub fn n_vendors(&self) -> usize {
        self.vendors.len()
    }

    pub fn n_observations(&self) -> usize {
        self.vendors.iter().map(|v| v.observations.len()).sum()
    }

    pub fn observations(&self) -> impl Iterator<Item = &PanelObservation> {
        self.vendors.iter().flat_map(|v| v.observations.iter())
    }

    /// Checks every observation's rating and bucket against its state index.
    pub fn validate_against(&self, space: &StateSpace) -> Result<()> {
        for o in self.observations() {
            if o.state_index >= space.len() {
                return Err(Error::InvalidPanel(format!(
                    "vendor {} week {}: state {} outside a {}-state space",
                    o.vendor_id,
                    o.week,
                    o.state_index,
                    space.len()
                )));
            }
            let (r, b) = space.coords(o.state_index);
            let grid_rating = space.rating_grid().points()[r];
            if b != o.sales_bucket || (grid_rating - o.rating).abs() > 5e-7 {
                return Err(Error::InvalidPanel(format!(
                    "vendor {} week {}: state {} is (rating {grid_rating}, bucket {b}), row says ({}, {})",
                    o.vendor_id, o.week, o.state_index, o.rating, o.sales_bucket
                )));
            }
        }
        Ok(())
    }
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
        return Err(Error::StaleSolution(format!("residual {:.3e} exceeds tolerance", solution.max_residual())));
    }
    Ok(())
}

/// Inverse-CDF draw from a sparse probability row.
fn draw_from(row: &[(usize, f64)], u: f64) -> usize {
    let mut acc = 0.0;
    for &(j, p) in row {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.last().map(|&(j, _)| j).expect("kernel rows are non-empty")
}

fn draw_dense(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w / total;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// Random stream of one vendor.
pub fn vendor_rng(seed: u64, vendor_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(vendor_id);
    rng
}

fn simulate_vendor(
    solution: &EquilibriumSolution,
    model: &Model,
    config: &SimulationConfig,
    vendor_id: u64,
) -> VendorHistory {
    let mut rng = vendor_rng(config.seed, vendor_id);
    let ty = if rng.gen::<f64>() < model.entry.high_share() { QualityType::High } else { QualityType::Low };
    let entry_week = if config.staggered_entry { rng.gen_range(1..=config.horizon_weeks) } else { 1 };
    let mut state = draw_dense(model.entry.get(ty), rng.gen::<f64>());
    let exit_prob = &solution.exit_prob[ty.index()];
    let p = &model.params;
    let mut observations = Vec::with_capacity((config.horizon_weeks - entry_week + 1) as usize);
    let mut censored = true;
    for week in entry_week..=config.horizon_weeks {
        let (r, b) = model.space.coords(state);
        let mut obs = PanelObservation {
            vendor_id,
            week,
            age: week - entry_week,
            state_index: state,
            rating: model.space.rating_grid().points()[r],
            sales_bucket: b,
            price_obs: None,
            exited_this_week: false,
        };
        // Exit iff the cost shock exceeds the cutoff: probability 1 − F(c̄).
        if rng.gen::<f64>() < exit_prob[state] {
            obs.exited_this_week = true;
            observations.push(obs);
            censored = false;
            break;
        }
        let z: f64 = rng.sample(StandardNormal);
        obs.price_obs = Some(p.price_noise.observe(solution.beliefs.theta_hat[state], p.sigma_p, z));
        observations.push(obs);
        state = draw_from(model.kernel.row(ty, state), rng.gen::<f64>());
    }
    VendorHistory { meta: VendorMeta { vendor_id, entry_week, censored, true_type: Some(ty) }, observations }
}

/// Simulates `config.n_vendors` vendor lifecycles from a converged equilibrium.
pub fn simulate_panel(solution: &EquilibriumSolution, model: &Model, config: &SimulationConfig) -> Result<Panel> {
    config.validate()?;
    check_solution(solution, model)?;
    let vendors = (0..config.n_vendors as u64)
        .into_par_iter()
        .map(|id| simulate_vendor(solution, model, config, id))
        .collect();
    Ok(Panel { vendors })
}

/// Rating quantiles among the active rows of one sales bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingProfile {
    pub sales_bucket: usize,
    pub rows: usize,
    pub p30: f64,
    pub median: f64,
    pub p70: f64,
}

/// One-week survival frequency of one (rating class, age class) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCell {
    pub high_rating: bool,
    pub young: bool,
    pub at_risk: usize,
    pub exits: usize,
    pub survival: f64,
}

/// Kaplan–Meier survival by age for one rating class (rating at the week of risk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub high_rating: bool,
    /// `S(a)` for `a = 0, 1, …`: probability of still being active after age `a`.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
}

/// Summary statistics of a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n_vendors: usize,
    pub n_observations: usize,
    pub rating_by_sales: Vec<RatingProfile>,
    pub survival_cells: Vec<SurvivalCell>,
    pub survival_curves: Vec<SurvivalCurve>,
    /// Share of vendors active at market closure.
    pub active_share: f64,
    /// Age at exit → number of vendors (closure exits excluded).
    pub exit_age_histogram: BTreeMap<u32, usize>,
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Rating dispersion by sales bucket, survival by rating and age, the share
/// active at closure and the exit-age histogram.
pub fn empirical_moments(panel: &Panel) -> Result<MomentReport> {
    if panel.vendors.is_empty() {
        return Err(Error::InvalidPanel("no vendors".into()));
    }
    let mut by_bucket: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut cells = [[(0usize, 0usize); 2]; 2];
    let mut curves: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    let mut exit_age_histogram = BTreeMap::new();
    for v in &panel.vendors {
        for o in &v.observations {
            let high = usize::from(o.rating >= HIGH_RATING);
            let young = usize::from(o.age < YOUNG_WEEKS);
            let exit = usize::from(o.exited_this_week);
            cells[high][young].0 += 1;
            cells[high][young].1 += exit;
            let curve = &mut curves[high];
            if curve.len() <= o.age as usize {
                curve.resize(o.age as usize + 1, (0, 0));
            }
            curve[o.age as usize].0 += 1;
            curve[o.age as usize].1 += exit;
            if o.price_obs.is_some() {
                by_bucket.entry(o.sales_bucket).or_default().push(o.rating);
            }
            if o.exited_this_week {
                *exit_age_histogram.entry(o.age).or_insert(0) += 1;
            }
        }
    }
    let rating_by_sales = by_bucket
        .into_iter()
        .map(|(b, mut r)| {
            r.sort_by(f64::total_cmp);
            RatingProfile {
                sales_bucket: b,
                rows: r.len(),
                p30: quantile(&r, 0.3),
                median: quantile(&r, 0.5),
                p70: quantile(&r, 0.7),
            }
        })
        .collect();
    let mut survival_cells = Vec::new();
    for high in [true, false] {
        for young in [true, false] {
            let (at_risk, exits) = cells[usize::from(high)][usize::from(young)];
            let survival = if at_risk > 0 { 1.0 - exits as f64 / at_risk as f64 } else { f64::NAN };
            survival_cells.push(SurvivalCell { high_rating: high, young, at_risk, exits, survival });
        }
    }
    let survival_curves = [true, false]
        .into_iter()
        .map(|high| {
            let mut s = 1.0;
            let data = &curves[usize::from(high)];
            let survival = data
                .iter()
                .map(|&(n, d)| {
                    if n > 0 {
                        s *= 1.0 - d as f64 / n as f64;
                    }
                    s
                })
                .collect();
            SurvivalCurve { high_rating: high, survival, at_risk: data.iter().map(|&(n, _)| n).collect() }
        })
        .collect();
    let active = panel.vendors.iter().filter(|v| v.meta.censored).count();
    Ok(MomentReport {
        n_vendors: panel.n_vendors(),
        n_observations: panel.n_observations(),
        rating_by_sales,
        survival_cells,
        survival_curves,
        active_share: active as f64 / panel.n_vendors() as f64,
        exit_age_histogram,
    })
}

/// Path of the metadata sidecar written next to a panel CSV.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    vendors: Vec<VendorMeta>,
}

/// Writes the panel as CSV plus a JSON metadata sidecar (`<path>.meta.json`).
pub fn write_panel(panel: &Panel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(PANEL_HEADER).map_err(csv_err)?;
    for o in panel.observations() {
        w.write_record([
            o.vendor_id.to_string(),
            o.week.to_string(),
            o.age.to_string(),
            o.state_index.to_string(),
            format!("{:.6}", o.rating),
            o.sales_bucket.to_string(),
            o.price_obs.map(format_g17).unwrap_or_default(),
            u8::from(o.exited_this_week).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let meta = Sidecar { vendors: panel.vendors.iter().map(|v| v.meta.clone()).collect() };
    let mut f = BufWriter::new(File::create(&side).map_err(|e| Error::io(&side, e))?);
    let text = to_json_string(&meta).map_err(|e| Error::io(&side, e.into()))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&side, e))?;
    f.flush().map_err(|e| Error::io(&side, e))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, k: usize, line: usize) -> Result<T> {
    let raw = rec.get(k).unwrap_or("");
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("column `{}`: cannot parse {raw:?}", PANEL_HEADER[k]),
    })
}

/// Reads a panel CSV; metadata comes from the sidecar when present and is
/// otherwise reconstructed (entry week from the first row, censoring from the
/// absence of an exit row, unknown type).
pub fn read_panel(path: &Path) -> Result<Panel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    if header.iter().map(str::trim).ne(PANEL_HEADER.iter().copied()) {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", PANEL_HEADER.join(",")) });
    }
    let mut vendors: Vec<VendorHistory> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if rec.len() != PANEL_HEADER.len() {
            return Err(Error::Parse { line, message: format!("expected 8 fields, found {}", rec.len()) });
        }
        let price_raw = rec.get(6).unwrap_or("").trim();
        let exited: u8 = parse_field(&rec, 7, line)?;
        if exited > 1 {
            return Err(Error::Parse { line, message: "`exited` must be 0 or 1".into() });
        }
        let obs = PanelObservation {
            vendor_id: parse_field(&rec, 0, line)?,
            week: parse_field(&rec, 1, line)?,
            age: parse_field(&rec, 2, line)?,
            state_index: parse_field(&rec, 3, line)?,
            rating: parse_field(&rec, 4, line)?,
            sales_bucket: parse_field(&rec, 5, line)?,
            price_obs: if price_raw.is_empty() { None } else { Some(parse_field(&rec, 6, line)?) },
            exited_this_week: exited == 1,
        };
        if obs.price_obs.is_none() && !obs.exited_this_week {
            return Err(Error::Parse { line, message: "price missing in a week without exit".into() });
        }
        match vendors.last_mut() {
            Some(v) if v.meta.vendor_id == obs.vendor_id => {
                let prev = v.observations.last().expect("vendors are created with a row");
                if prev.exited_this_week {
                    return Err(Error::Parse { line, message: format!("vendor {} has rows after exit", obs.vendor_id) });
                }
                if obs.age != prev.age + 1 || obs.week != prev.week + 1 {
                    return Err(Error::Parse {
                        line,
                        message: format!("vendor {}: ages/weeks not contiguous", obs.vendor_id),
                    });
                }
                v.observations.push(obs);
            }
            last => {
                if let Some(v) = last {
                    if v.meta.vendor_id > obs.vendor_id {
                        return Err(Error::Parse { line, message: "vendors must appear in ascending id order".into() });
                    }
                }
                if obs.week < obs.age {
                    return Err(Error::Parse { line, message: "age exceeds calendar week".into() });
                }
                let meta = VendorMeta {
                    vendor_id: obs.vendor_id,
                    entry_week: obs.week - obs.age,
                    censored: false,
                    true_type: None,
                };
                vendors.push(VendorHistory { meta, observations: vec![obs] });
            }
        }
    }
    for v in &mut vendors {
        v.meta.censored = !v.exited();
    }
    let side = sidecar_path(path);
    if side.exists() {
        let f = File::open(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::Parse { line: e.line(), message: format!("{}: {e}", side.display()) })?;
        if meta.vendors.len() != vendors.len() {
            return Err(Error::InvalidPanel(format!(
                "sidecar lists {} vendors, panel has {}",
                meta.vendors.len(),
                vendors.len()
            )));
        }
        for (v, m) in vendors.iter_mut().zip(meta.vendors) {
            if m.vendor_id != v.meta.vendor_id || m.censored != v.meta.censored {
                return Err(Error::InvalidPanel(format!("sidecar disagrees with the panel for vendor {}", m.vendor_id)));
            }
            v.meta = m;
        }
    }
    Ok(Panel { vendors })
}
