//! Command-line front end: argument parsing, artifact I/O, run manifests and
//! exit codes.
//!
//! Exit codes: 0 success, 1 usage or invalid input, 2 numerical failure,
//! 3 I/O failure.

pub mod config;
mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ratingeq::analysis::{
    comparative_statics_sweep, entry_profit_report, no_rating_counterfactual, returns_to_reputation,
    stylized_fact_regression, sybil_attack_value, RegressionSpec, SweepSpec,
};
use ratingeq::equilibrium::four_state::STATE_LABELS;
use ratingeq::equilibrium::{solve_equilibrium, solve_four_state_closed_form, EquilibriumSolution};
use ratingeq::estimation::{maximize_likelihood, recovery_table, total_loglik, EstimationData, EstimationResult, RecoveryRow};
use ratingeq::model::{
    default_a2_probe, validate_assumption_a1, validate_assumption_a2, AssumptionReport, CostDistribution, Model,
    ModelParams, QualityType, StateSpace,
};
use ratingeq::numfmt::{format_g17, to_json_string};
use ratingeq::simulator::{read_panel, sidecar_path, simulate_panel, write_panel};
use ratingeq::uniqueness::{estimate_beta_bar, verify_uniqueness_at};
use ratingeq::{Error, Result};
use serde::{Deserialize, Serialize};

use config::{parse_grid, RunConfig};
pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else if err.is_io() {
        EXIT_IO
    } else {
        EXIT_USAGE
    }
}

#[derive(Debug, Parser)]
#[command(name = "ratingeq", version, about = "Reputation equilibria in rated markets: solve, simulate, estimate, analyse")]
struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Where to write the run manifest (default: next to the first output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Model configuration checks.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Equilibrium computation and verification.
    #[command(subcommand)]
    Eq(EqCmd),
    /// Panel simulation.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Maximum-likelihood estimation.
    #[command(subcommand)]
    Est(EstCmd),
    /// Counterfactuals, sweeps and regressions.
    #[command(subcommand)]
    An(AnCmd),
    /// Multi-step workflows.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum ModelCmd {
    /// Check the maintained assumptions and print a diagnostic report.
    Validate {
        #[command(flatten)]
        config: ConfigArg,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with the numerical-failure code when an assumption fails.
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Debug, Subcommand)]
enum EqCmd {
    /// Solve for the stationary equilibrium.
    Solve {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Closed-form solution of the four-state example as CSV.
    FourState {
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        beta: f64,
        /// Entry mass of low types.
        #[arg(long, default_value_t = 0.5)]
        entry_low: f64,
        /// Entry mass of high types.
        #[arg(long, default_value_t = 0.5)]
        entry_high: f64,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the uniqueness conditions at the computed equilibrium.
    Verify {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutArg,
        /// Use this solution instead of solving again.
        #[arg(long)]
        eq: Option<PathBuf>,
    },
    /// Scan discount factors for the uniqueness threshold.
    BetaBar {
        #[command(flatten)]
        config: ConfigArg,
        /// Grid as start:end:points (default from the configuration).
        #[arg(long)]
        grid: Option<String>,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    /// Simulate a panel of vendors from a solved equilibrium.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Solution written by `eq solve`.
        #[arg(long)]
        eq: PathBuf,
        /// Panel CSV (a `.meta.json` sidecar is written next to it).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum EstCmd {
    /// Maximize the likelihood and report estimates with OPG standard errors.
    Fit {
        /// Panel CSV written by `sim run`.
        #[arg(long)]
        panel: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Print the log-likelihood at the configured parameters.
    Loglik {
        /// Panel CSV written by `sim run`.
        #[arg(long)]
        panel: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TypeArg {
    Low,
    High,
}

impl From<TypeArg> for QualityType {
    fn from(t: TypeArg) -> Self {
        match t {
            TypeArg::Low => QualityType::Low,
            TypeArg::High => QualityType::High,
        }
    }
}

#[derive(Debug, Subcommand)]
enum AnCmd {
    /// Value lost when the rating drops, plus entry profits.
    Returns {
        /// Solution written by `eq solve`.
        #[arg(long)]
        eq: PathBuf,
        /// Configuration for the dollar conversion (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rating before the drop.
        #[arg(long, default_value_t = 5.0)]
        from: f64,
        /// Rating after the drop.
        #[arg(long, default_value_t = 4.99)]
        to: f64,
        /// Sales bucket in which the drop happens.
        #[arg(long, default_value_t = 0)]
        bucket: usize,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the market with and without informative ratings.
    NoRating {
        #[command(flatten)]
        config: ConfigArg,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dollar value of abandoning an identity and re-entering.
    Sybil {
        /// Solution written by `eq solve`.
        #[arg(long)]
        eq: PathBuf,
        /// Configuration for the dollar conversion (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// State index of the identity being abandoned.
        #[arg(long)]
        state: usize,
        /// Entry fee in dollars.
        #[arg(long, default_value_t = 500.0)]
        fee: f64,
        /// Seller type.
        #[arg(long = "type", value_enum, default_value_t = TypeArg::Low)]
        ty: TypeArg,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Comparative statics over one parameter, as a long CSV table.
    Sweep {
        /// Sweep specification (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Base parameters, grid and simulation size (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Regression of log price on ratings and controls, as CSV.
    Regress {
        /// Panel CSV written by `sim run`.
        #[arg(long)]
        panel: PathBuf,
        /// Regression specification (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Debug, Subcommand)]
enum PipelineCmd {
    /// Solve, simulate, estimate from a perturbed start, and compare with the truth.
    Recover {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutArg,
        /// Also keep the simulated panel.
        #[arg(long)]
        panel_out: Option<PathBuf>,
    },
}

/// A solved equilibrium together with everything needed to rebuild its model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionDocument {
    pub schema_version: u32,
    pub params: ModelParams,
    pub space: StateSpace,
    pub cost: CostDistribution,
    pub solution: EquilibriumSolution,
}

impl SolutionDocument {
    fn new(model: &Model, solution: EquilibriumSolution) -> Self {
        SolutionDocument {
            schema_version: config::SCHEMA_VERSION,
            params: model.params.clone(),
            space: model.space.clone(),
            cost: model.cost,
            solution,
        }
    }

    fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let doc: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: e.line(), message: format!("{}: {e}", path.display()) })?;
        if doc.schema_version != config::SCHEMA_VERSION {
            return Err(Error::Config(format!("{}: unsupported schema_version {}", path.display(), doc.schema_version)));
        }
        Ok(doc)
    }

    fn model(&self) -> Result<Model> {
        Model::from_params(self.params.clone(), self.space.clone(), self.cost)
    }

    /// Refuses a solution computed for a different model.
    fn check_matches(&self, model: &Model) -> Result<()> {
        if self.params != model.params || self.space != model.space || self.cost != model.cost {
            return Err(Error::StaleSolution(
                "the solution was computed for different parameters, grid or cost law than the configuration".into(),
            ));
        }
        Ok(())
    }
}

/// The `model validate` report.
#[derive(Debug, Serialize)]
struct ValidationReport {
    n_ratings: usize,
    n_buckets: usize,
    n_states: usize,
    entry_state: usize,
    a1: AssumptionReport,
    a2: AssumptionReport,
    holds: bool,
}

/// The `pipeline recover` report.
#[derive(Debug, Serialize)]
struct RecoveryReport {
    seed: u64,
    n_vendors: usize,
    perturbation: f64,
    truth: ModelParams,
    start: ModelParams,
    truth_loglik: f64,
    estimation: EstimationResult,
    comparison: Vec<RecoveryRow>,
    n_recovered: usize,
    n_free: usize,
}

/// Sybil report.
#[derive(Debug, Serialize)]
struct SybilReport {
    state: usize,
    rating: f64,
    sales_bucket: usize,
    quality: QualityType,
    fee_dollars: f64,
    gain_dollars: f64,
    profitable: bool,
}

/// Returns report with the entry-profit comparison alongside.
#[derive(Debug, Serialize)]
struct ReturnsOutput {
    returns: ratingeq::analysis::ReturnsReport,
    entry_profit: ratingeq::analysis::EntryProfitReport,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn json<T: Serialize + ?Sized>(value: &T) -> String {
    to_json_string(value).expect("reports serialize")
}

/// Per-run bookkeeping shared by all subcommands.
struct Run {
    config: Option<RunConfig>,
    outputs: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn load_config(&mut self, path: &Path) -> Result<RunConfig> {
        let cfg = RunConfig::load(path)?;
        self.inputs.push(path.to_path_buf());
        self.config = Some(cfg.clone());
        Ok(cfg)
    }

    fn optional_config(&mut self, path: Option<&PathBuf>) -> Result<RunConfig> {
        match path {
            Some(p) => self.load_config(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// Writes `text` to `out` when given, to standard output otherwise.
    fn emit(&mut self, out: Option<&PathBuf>, text: &str) -> Result<()> {
        match out {
            Some(p) => {
                write_text(p, text)?;
                self.outputs.push(p.clone());
            }
            None => print!("{text}"),
        }
        Ok(())
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_USAGE;
        }
    };
    let started = Instant::now();
    let mut run = Run { config: None, outputs: Vec::new(), inputs: Vec::new() };
    let outcome = pool.install(|| execute(&cli, &mut run));
    match outcome {
        Ok(()) => {
            let manifest = RunManifest::new(&argv, &cli, &run, started.elapsed().as_secs_f64());
            match manifest.write(cli.manifest.as_deref(), &run.outputs) {
                Ok(_) => EXIT_OK,
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code(&e)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli, run: &mut Run) -> Result<()> {
    match &cli.command {
        Command::Model(ModelCmd::Validate { config, out, strict }) => {
            let cfg = run.load_config(&config.config)?;
            let model = cfg.model()?;
            let a1 = validate_assumption_a1(&model.kernel);
            let probe = default_a2_probe(&model.cost, &model.params, 201);
            let a2 = validate_assumption_a2(&model.cost, &model.params, Some(&probe));
            let report = ValidationReport {
                n_ratings: model.space.n_ratings(),
                n_buckets: model.space.n_buckets(),
                n_states: model.n_states(),
                entry_state: model.space.entry_state(),
                holds: a1.holds && a2.holds,
                a1,
                a2,
            };
            run.emit(out.as_ref(), &json(&report))?;
            if *strict && !report.holds {
                let which = if !report.a1.holds { "A1" } else { "A2" };
                let detail = if !report.a1.holds { &report.a1.detail } else { &report.a2.detail };
                return Err(Error::AssumptionViolated { assumption: which, detail: detail.clone() });
            }
            Ok(())
        }
        Command::Eq(EqCmd::Solve { config, out }) => {
            let cfg = run.load_config(&config.config)?;
            let model = cfg.model()?;
            let solution = solve_equilibrium(&model, &cfg.solver.options())?;
            run.emit(Some(&out.out), &json(&SolutionDocument::new(&model, solution)))
        }
        Command::Eq(EqCmd::FourState { gamma, rho, beta, entry_low, entry_high, out }) => {
            let solution = solve_four_state_closed_form(*gamma, *rho, *beta, [*entry_low, *entry_high])?;
            let mut text = String::from("state,type,cutoff,mass,price\n");
            for ty in QualityType::ALL {
                for (s, label) in STATE_LABELS.iter().enumerate() {
                    text.push_str(&format!(
                        "{label},{},{},{},{}\n",
                        ty.label(),
                        format_g17(solution.cutoffs.get(ty)[s]),
                        format_g17(solution.masses.get(ty)[s]),
                        format_g17(solution.beliefs.theta_hat[s]),
                    ));
                }
            }
            run.emit(out.as_ref(), &text)
        }
        Command::Eq(EqCmd::Verify { config, out, eq }) => {
            let cfg = run.load_config(&config.config)?;
            let model = cfg.model()?;
            let solution = match eq {
                Some(path) => {
                    let doc = SolutionDocument::load(path)?;
                    run.inputs.push(path.clone());
                    doc.check_matches(&model)?;
                    doc.solution
                }
                None => solve_equilibrium(&model, &cfg.solver.options())?,
            };
            let report = verify_uniqueness_at(&solution, &model)?;
            run.emit(Some(&out.out), &json(&report))
        }
        Command::Eq(EqCmd::BetaBar { config, grid, out }) => {
            let cfg = run.load_config(&config.config)?;
            let model = cfg.model()?;
            let betas = parse_grid(grid.as_deref().unwrap_or(&cfg.uniqueness.beta_grid))?;
            let report = estimate_beta_bar(&model, &betas, &cfg.solver.options())?;
            run.emit(out.as_ref(), &json(&report))
        }
        Command::Sim(SimCmd::Run { config, eq, out }) => {
            let cfg = run.load_config(&config.config)?;
            let model = cfg.model()?;
            let doc = SolutionDocument::load(eq)?;
            run.inputs.push(eq.clone());
            doc.check_matches(&model)?;
            let panel = simulate_panel(&doc.solution, &model, &cfg.simulation.config(cli.seed))?;
            write_panel(&panel, out)?;
            run.outputs.push(out.clone());
            run.outputs.push(sidecar_path(out));
            Ok(())
        }
        Command::Est(EstCmd::Fit { panel, config, out }) => {
            let cfg = run.load_config(&config.config)?;
            let est = cfg.estimation_config()?;
            let data = read_panel(panel)?;
            run.inputs.push(panel.clone());
            let result = maximize_likelihood(&data, &est, Some(&cfg.start_params()?))?;
            run.emit(Some(&out.out), &json(&result))
        }
        Command::Est(EstCmd::Loglik { panel, config }) => {
            let cfg = run.load_config(&config.config)?;
            let est = cfg.estimation_config()?;
            let data = read_panel(panel)?;
            run.inputs.push(panel.clone());
            let prepared = EstimationData::prepare(&data, &est.space)?;
            println!("{}", format_g17(total_loglik(&prepared, &cfg.params, &est)));
            Ok(())
        }
        Command::An(AnCmd::Returns { eq, config, from, to, bucket, out }) => {
            let cfg = run.optional_config(config.as_ref())?;
            let doc = SolutionDocument::load(eq)?;
            run.inputs.push(eq.clone());
            let model = doc.model()?;
            let returns = returns_to_reputation(&doc.solution, &model, *from, *to, *bucket, &cfg.dollars)?;
            let entry_profit = entry_profit_report(&doc.solution, &model, &cfg.dollars)?;
            run.emit(out.as_ref(), &json(&ReturnsOutput { returns, entry_profit }))
        }
        Command::An(AnCmd::NoRating { config, out }) => {
            let cfg = run.load_config(&config.config)?;
            if cfg.cost != config::CostFamily::Normal {
                return Err(Error::Config("the no-rating counterfactual supports the normal cost family only".into()));
            }
            let report = no_rating_counterfactual(&cfg.params, &cfg.space()?, &cfg.solver.options())?;
            run.emit(out.as_ref(), &json(&report))
        }
        Command::An(AnCmd::Sybil { eq, config, state, fee, ty, out }) => {
            let cfg = run.optional_config(config.as_ref())?;
            let doc = SolutionDocument::load(eq)?;
            run.inputs.push(eq.clone());
            let model = doc.model()?;
            let quality = QualityType::from(*ty);
            let gain = sybil_attack_value(&doc.solution, &model, *state, quality, *fee, &cfg.dollars)?;
            let report = SybilReport {
                state: *state,
                rating: model.space.rating(*state),
                sales_bucket: model.space.bucket(*state),
                quality,
                fee_dollars: *fee,
                gain_dollars: gain,
                profitable: gain > 0.0,
            };
            run.emit(out.as_ref(), &json(&report))
        }
        Command::An(AnCmd::Sweep { spec, config, out }) => {
            let cfg = run.optional_config(config.as_ref())?;
            let sweep: SweepSpec = read_json(spec)?;
            run.inputs.push(spec.clone());
            let rows = comparative_statics_sweep(
                &sweep,
                &cfg.params,
                &cfg.space()?,
                &cfg.simulation.config(cli.seed),
                &cfg.solver.options(),
            )?;
            let mut text = String::from("parameter,value,metric,group,mean,sd,n,seed,error\n");
            for r in rows {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.parameter,
                    format_g17(r.value),
                    r.metric,
                    r.group,
                    format_g17(r.mean),
                    format_g17(r.sd),
                    r.n,
                    r.seed,
                    csv_field(&r.error),
                ));
            }
            run.emit(Some(&out.out), &text)
        }
        Command::An(AnCmd::Regress { panel, spec, out }) => {
            let spec: RegressionSpec = read_json(spec)?;
            let data = read_panel(panel)?;
            run.inputs.push(panel.clone());
            let r = stylized_fact_regression(&data, &spec)?;
            let mut text = String::from("term,coefficient,robust_se,n_obs,n_groups,r_squared\n");
            for (k, name) in r.names.iter().enumerate() {
                text.push_str(&format!(
                    "{name},{},{},{},{},{}\n",
                    format_g17(r.coefficients[k]),
                    format_g17(r.robust_se[k]),
                    r.n_obs,
                    r.n_groups,
                    format_g17(r.r_squared),
                ));
            }
            run.emit(Some(&out.out), &text)
        }
        Command::Pipeline(PipelineCmd::Recover { config, out, panel_out }) => {
            let cfg = run.load_config(&config.config)?;
            let est = cfg.estimation_config()?;
            let truth = cfg.params.clone();
            let model = cfg.model()?;
            let solution = solve_equilibrium(&model, &cfg.solver.options())?;
            let sim = cfg.simulation.config(cli.seed);
            let panel = simulate_panel(&solution, &model, &sim)?;
            if let Some(p) = panel_out {
                write_panel(&panel, p)?;
                run.outputs.push(p.clone());
                run.outputs.push(sidecar_path(p));
            }
            let start = est.perturbed_start(&truth, cfg.recovery.perturbation)?;
            let prepared = EstimationData::prepare(&panel, &est.space)?;
            let truth_loglik = total_loglik(&prepared, &truth, &est);
            let result = maximize_likelihood(&panel, &est, Some(&start))?;
            let comparison = recovery_table(&result, &truth, cfg.recovery.se_multiple, cfg.recovery.relative_tolerance);
            let report = RecoveryReport {
                seed: cli.seed,
                n_vendors: sim.n_vendors,
                perturbation: cfg.recovery.perturbation,
                n_recovered: comparison.iter().filter(|r| r.recovered).count(),
                n_free: comparison.len(),
                truth,
                start,
                truth_loglik,
                estimation: result,
                comparison,
            };
            run.emit(Some(&out.out), &json(&report))
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
