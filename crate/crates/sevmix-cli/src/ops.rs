//! One function per subcommand. Every handler builds a RunConfig from its
//! flags, runs the corresponding library stage, and writes JSON/CSV
//! artifacts into the output directory.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use sevmix::baselines::{
    comparison_csv, fit_mixture_gamma_lomax, fit_npmle_expmix, fit_simple, tail_robustness_experiment,
    SimpleFamily,
};
use sevmix::diagnostics::{diagnostics, DiagnosticsConfig};
use sevmix::gem::{estep, fit, init_params, EStepMode, FitConfig, FitData, PartLambdas, PartPlans};
use sevmix::infer::{bootstrap_ci, fisher_info_reduced, param_labels, wald_ci, BootstrapConfig};
use sevmix::model::ModelParams;
use sevmix::penalty::{lambda_grid, Penalty};
use sevmix::rng::{substream, STREAM_ESTEP};
use sevmix::schema::{data_csv, parse_data_csv, CovariateSchema, Dataset};
use sevmix::select::{
    auto_adjust, collapse_and_refit, tune_lambda, AdjustConfig, TuneCriterion, TuneGrids,
};
use sevmix::sim::simulate_dataset;

use crate::run::{read_to_string, write_csv, write_json, CliError, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PenaltyArg {
    Lasso,
    Scad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    Paic,
    Pbic,
    Cv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EStepArg {
    Stochastic,
    Quadrature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CiMethodArg {
    Wald,
    Bootstrap,
}

#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Data CSV: one column per schema variable plus `y`.
    #[arg(long)]
    pub data: PathBuf,
    /// Covariate schema JSON.
    #[arg(long)]
    pub schema: PathBuf,
    /// Splicing threshold between body and tail.
    #[arg(long)]
    pub tau: f64,
}

#[derive(Args, Clone, Debug)]
pub struct EngineArgs {
    /// Root seed; all stage randomness derives from it via named substreams.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Latent conditional expectations: simulated draws or quadrature.
    #[arg(long, value_enum, default_value_t = EStepArg::Stochastic)]
    pub estep: EStepArg,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Stopping tolerance on the penalized log-likelihood.
    #[arg(long, default_value_t = 1e-2)]
    pub tol: f64,
    /// Worker threads. Execution is currently always serial; values above 1
    /// are accepted and ignored so outputs stay bit-reproducible.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Clone, Debug)]
pub struct PenaltyArgs {
    #[arg(long, value_enum, default_value_t = PenaltyArg::Lasso)]
    pub penalty: PenaltyArg,
    /// Concavity knob of the SCAD penalty.
    #[arg(long, default_value_t = Penalty::SCAD_A)]
    pub scad_a: f64,
}

impl PenaltyArgs {
    fn build(&self) -> Result<Penalty, CliError> {
        match self.penalty {
            PenaltyArg::Lasso => Ok(Penalty::Lasso),
            PenaltyArg::Scad => {
                if self.scad_a <= 2.0 {
                    return Err(CliError::Parse(format!(
                        "--scad-a must exceed 2, got {}",
                        self.scad_a
                    )));
                }
                Ok(Penalty::Scad { a: self.scad_a })
            }
        }
    }

    fn name(&self) -> &'static str {
        match self.penalty {
            PenaltyArg::Lasso => "lasso",
            PenaltyArg::Scad => "scad",
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub schema: PathBuf,
    /// Generating model JSON (a fit artifact or a bare parameter set).
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    /// Body component count.
    #[arg(long)]
    pub g: usize,
    /// Penalty rate; 0 fits unpenalized, anything larger applies adaptive
    /// group penalties weighted by a pilot fit.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[arg(long)]
    pub g: usize,
    #[arg(long, value_enum, default_value_t = CriterionArg::Pbic)]
    pub criterion: CriterionArg,
    /// Folds for --criterion cv.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Comma-separated penalty rates; the built-in grid when omitted.
    #[arg(long)]
    pub lambda_grid: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct AdjustArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    /// Fitted model JSON to adjust.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Starting merge/zero tolerance.
    #[arg(long, default_value_t = 1e-5)]
    pub delta0: f64,
    /// Geometric tolerance growth per round.
    #[arg(long, default_value_t = 0.3)]
    pub delta_growth: f64,
    /// Largest acceptable partial-objective drop per round.
    #[arg(long, default_value_t = 1.0)]
    pub xi: f64,
    #[arg(long, default_value_t = 400)]
    pub max_rounds: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct RefitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Adjusted model JSON whose coefficient pattern defines the reduction.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = CiMethodArg::Bootstrap)]
    pub method: CiMethodArg,
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Optional schema; without it only the `y` column is read.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Body components of the overlapping mixture comparator.
    #[arg(long, default_value_t = 3)]
    pub g: usize,
    /// Support cap for the nonparametric exponential mixture.
    #[arg(long, default_value_t = 10)]
    pub npmle_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Threshold for the tail-robustness experiment (requires --robustness-g).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Comma-separated component counts for the tail-robustness experiment.
    #[arg(long)]
    pub robustness_g: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[arg(long)]
    pub g: usize,
    #[arg(long, value_enum, default_value_t = CriterionArg::Pbic)]
    pub criterion: CriterionArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long)]
    pub lambda_grid: Option<String>,
    /// Confidence level for the final intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Deserialize)]
struct ModelFile {
    params: ModelParams,
}

fn load_schema(path: &Path) -> Result<CovariateSchema, CliError> {
    let text = read_to_string(path)?;
    Ok(CovariateSchema::from_json(&text)?)
}

fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    let text = read_to_string(path)?;
    serde_json::from_str::<ModelFile>(&text)
        .map(|m| m.params)
        .or_else(|_| serde_json::from_str::<ModelParams>(&text))
        .map_err(|e| CliError::Parse(format!("{}: not a model file: {e}", path.display())))
}

fn load_dataset(args: &DataArgs) -> Result<(CovariateSchema, Dataset), CliError> {
    let schema = load_schema(&args.schema)?;
    let text = read_to_string(&args.data)?;
    let (rows, y) = parse_data_csv(&schema, &text)?;
    let x = sevmix::schema::encode_design(&schema, &rows)?;
    Ok((schema, Dataset::new(y, x, args.tau)?))
}

fn fit_config(e: &EngineArgs) -> FitConfig {
    if e.threads > 1 {
        log::warn!("running serially; --threads {} ignored to keep outputs reproducible", e.threads);
    }
    FitConfig {
        max_iters: e.max_iters,
        tol: e.tol,
        estep: match e.estep {
            EStepArg::Quadrature => EStepMode::Quadrature { tol: 1e-8 },
            EStepArg::Stochastic => EStepMode::default(),
        },
        seed: e.seed,
        ..FitConfig::default()
    }
}

fn estep_name(e: EStepArg) -> &'static str {
    match e {
        EStepArg::Stochastic => "stochastic",
        EStepArg::Quadrature => "quadrature",
    }
}

fn record_common(run: &mut RunConfig, data: &DataArgs, engine: &EngineArgs) {
    run.arg("data", &data.data)
        .arg("schema", &data.schema)
        .arg("tau", data.tau)
        .arg("seed", engine.seed)
        .arg("estep", estep_name(engine.estep))
        .arg("max_iters", engine.max_iters)
        .arg("tol", engine.tol);
}

fn parse_grid(arg: &Option<String>) -> Result<Vec<f64>, CliError> {
    match arg {
        None => Ok(lambda_grid()),
        Some(text) => text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Parse(format!("--lambda-grid: not a number: '{t}'")))
            })
            .collect(),
    }
}

fn criterion(arg: CriterionArg, folds: usize) -> Result<TuneCriterion, CliError> {
    Ok(match arg {
        CriterionArg::Paic => TuneCriterion::PAic,
        CriterionArg::Pbic => TuneCriterion::PBic,
        CriterionArg::Cv => {
            if folds < 2 {
                return Err(CliError::Parse(format!("--folds must be at least 2, got {folds}")));
            }
            TuneCriterion::Cv { folds }
        }
    })
}

fn criterion_name(arg: CriterionArg) -> &'static str {
    match arg {
        CriterionArg::Paic => "paic",
        CriterionArg::Pbic => "pbic",
        CriterionArg::Cv => "cv",
    }
}

// Adaptive group weights from a pilot: smaller pilot norms mean stronger
// shrinkage, the adaptive-LASSO recipe the tuning stage assumes.
fn adaptive_plans(
    schema: &CovariateSchema,
    penalty: Penalty,
    data: &FitData,
    pilot: &ModelParams,
) -> PartPlans {
    let g = pilot.g();
    let (d_tail, _, _) = (pilot.tail_coef().len(), 0, 0);
    let mut plans = PartPlans::from_schema(schema, penalty, data);
    plans.mix.apply_adaptive(pilot.mixing(), g);
    plans.body.apply_adaptive(pilot.body(), g);
    let tail = DMatrix::from_column_slice(d_tail, 1, pilot.tail_coef().as_slice());
    plans.tail.apply_adaptive(&tail, 1);
    plans
}

// Deterministic latent snapshot used to freeze partial objectives for
// tuning and adjustment, independent of the fitting E-step mode.
fn latent_snapshot(
    data: &FitData,
    params: &ModelParams,
    seed: u64,
) -> Result<sevmix::gem::LatentState, CliError> {
    let mut rng = substream(seed, STREAM_ESTEP);
    Ok(estep(data, params, EStepMode::Quadrature { tol: 1e-8 }, &mut rng)?)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let mut run = RunConfig::new("simulate");
    run.arg("schema", &a.schema).arg("truth", &a.truth).arg("n", a.n).arg("seed", a.seed);
    let schema = load_schema(&a.schema)?;
    let truth = load_model(&a.truth)?;
    let sim = simulate_dataset(&schema, &truth, a.n, a.seed)?;
    let csv = data_csv(&schema, &sim.raw, sim.dataset.y());
    write_csv(&a.out_dir, "data.csv", &run, &csv)?;
    write_json(&a.out_dir, "truth.json", &run, "params", &truth)?;
    Ok(())
}

pub fn cmd_fit(a: &FitArgs) -> Result<(), CliError> {
    let mut run = RunConfig::new("fit");
    record_common(&mut run, &a.data, &a.engine);
    run.arg("g", a.g)
        .arg("lambda", a.lambda)
        .arg("penalty", a.penalty.name())
        .arg("scad_a", a.penalty.scad_a);
    let (schema, ds) = load_dataset(&a.data)?;
    let data = FitData::from_dataset(&ds);
    let cfg = fit_config(&a.engine);
    let (d_mix, d_body, d_tail) = (data.x_mix.dim(), data.x_body.dim(), data.x_tail.dim());
    let init = init_params(&data, a.g, a.engine.seed)?;
    let report = if a.lambda == 0.0 {
        fit(&data, init, &PartPlans::unpenalized(d_mix, d_body, d_tail), PartLambdas::zero(), &cfg)?
    } else {
        let pilot = fit(
            &data,
            init,
            &PartPlans::unpenalized(d_mix, d_body, d_tail),
            PartLambdas::zero(),
            &cfg,
        )?;
        let plans = adaptive_plans(&schema, a.penalty.build()?, &data, &pilot.params);
        fit(&data, pilot.params, &plans, PartLambdas::uniform(a.lambda), &cfg)?
    };
    write_json(&a.out_dir, "model.json", &run, "params", &report.params)?;
    write_json(&a.out_dir, "fit_report.json", &run, "report", &report)?;
    Ok(())
}

pub fn cmd_tune(a: &TuneArgs) -> Result<(), CliError> {
    let mut run = RunConfig::new("tune");
    record_common(&mut run, &a.data, &a.engine);
    run.arg("g", a.g)
        .arg("penalty", a.penalty.name())
        .arg("scad_a", a.penalty.scad_a)
        .arg("criterion", criterion_name(a.criterion))
        .arg("folds", a.folds)
        .arg("lambda_grid", &a.lambda_grid);
    let (schema, ds) = load_dataset(&a.data)?;
    let data = FitData::from_dataset(&ds);
    let cfg = fit_config(&a.engine);
    let (d_mix, d_body, d_tail) = (data.x_mix.dim(), data.x_body.dim(), data.x_tail.dim());
    let init = init_params(&data, a.g, a.engine.seed)?;
    let pilot =
        fit(&data, init, &PartPlans::unpenalized(d_mix, d_body, d_tail), PartLambdas::zero(), &cfg)?;
    let latent = latent_snapshot(&data, &pilot.params, a.engine.seed)?;
    let plans = adaptive_plans(&schema, a.penalty.build()?, &data, &pilot.params);
    let grids = TuneGrids::uniform(&parse_grid(&a.lambda_grid)?);
    let report = tune_lambda(
        &data,
        &pilot.params,
        &latent,
        &plans,
        &grids,
        criterion(a.criterion, a.folds)?,
        &cfg,
        &AdjustConfig::default(),
        a.engine.seed,
    )?;
    write_csv(&a.out_dir, "tune.csv", &run, &report.to_csv())?;
    write_json(&a.out_dir, "tune.json", &run, "tuning", &report)?;
    Ok(())
}

pub fn cmd_adjust(a: &AdjustArgs) -> Result<(), CliError> {
    let mut run = RunConfig::new("adjust");
    record_common(&mut run, &a.data, &a.engine);
    run.arg("model", &a.model)
        .arg("lambda", a.lambda)
        .arg("penalty", a.penalty.name())
        .arg("scad_a", a.penalty.scad_a)
        .arg("delta0", a.delta0)
        .arg("delta_growth", a.delta_growth)
        .arg("xi", a.xi)
        .arg("max_rounds", a.max_rounds);
    let (schema, ds) = load_dataset(&a.data)?;
    let data = FitData::from_dataset(&ds);
    let params = load_model(&a.model)?;
    let latent = latent_snapshot(&data, &params, a.engine.seed)?;
    let plans = PartPlans::from_schema(&schema, a.penalty.build()?, &data);
    let cfg = AdjustConfig {
        delta0: a.delta0,
        eta: a.delta_growth,
        xi: a.xi,
        max_rounds: a.max_rounds,
    };
    let adjusted =
        auto_adjust(&data, &params, &latent, &plans, PartLambdas::uniform(a.lambda), &cfg);
    write_json(&a.out_dir, "model_adjusted.json", &run, "params", &adjusted.params)?;
    write_json(&a.out_dir, "adjust.json", &run, "audit", &adjusted.audit)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct ReductionReport<'a> {
    report: &'a sevmix::gem::FitReport,
    full_params: &'a ModelParams,
    mix: &'a sevmix::select::Reduction,
    body: &'a sevmix::select::Reduction,
    tail: &'a sevmix::select::Reduction,
}

pub fn cmd_refit(a: &RefitArgs) -> Result<(), CliError> {
    let mut run = RunConfig::new("refit");
    record_common(&mut run, &a.data, &a.engine);
    run.arg("model", &a.model);
    let (schema, ds) = load_dataset(&a.data)?;
    let data = FitData::from_dataset(&ds);
    let params = load_model(&a.model)?;
    let cfg = fit_config(&a.engine);
    let outcome = collapse_and_refit(&data, &schema, &params, &cfg)?;
    write_json(&a.out_dir, "model_reduced.json", &run, "params", &outcome.full_params)?;
    let payload = ReductionReport {
        report: &outcome.report,
        full_params: &outcome.full_params,
        mix: &outcome.mix,
        body: &outcome.body,
        tail: &outcome.tail,
    };
    write_json(&a.out_dir, "reduction.json", &run, "reduction", &payload)?;
    Ok(())
}

pub fn cmd_bootstrap(a: &BootstrapArgs) -> Result<(), CliError> {
    let mut run = RunConfig::new("bootstrap");
    record_common(&mut run, &a.data, &a.engine);
    run.arg("model", &a.model)
        .arg("method", match a.method {
            CiMethodArg::Wald => "wald",
            CiMethodArg::Bootstrap => "bootstrap",
        })
        .arg("replicates", a.replicates)
        .arg("level", a.level);
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(CliError::Parse(format!("--level must be in (0,1), got {}", a.level)));
    }
    let (schema, ds) = load_dataset(&a.data)?;
    let data = FitData::from_dataset(&ds);
    let params = load_model(&a.model)?;
    let labels = param_labels(&params, &schema, data.x_mix, data.x_body, data.x_tail);
    let table = match a.method {
        CiMethodArg::Wald => {
            let info = fisher_info_reduced(&data, &params)?;
            wald_ci(&params, &labels, &info, a.level)?
        }
        CiMethodArg::Bootstrap => {
            let cfg = BootstrapConfig {
                replicates: a.replicates,
                level: a.level,
                seed: a.engine.seed,
                fit: fit_config(&a.engine),
            };
            let outcome = bootstrap_ci(&data, &params, &labels, &[], &cfg)?;
            if outcome.failures > 0 {
                log::warn!("{} of {} replicates failed to refit", outcome.failures, outcome.attempted);
            }
            outcome.table
        }
    };
    write_csv(&a.out_dir, "ci.csv", &run, &table.to_csv())?;
    write_json(&a.out_dir, "ci.json", &run, "intervals", &table)?;
    Ok(())
}

// Responses only: find the `y` column and parse it, ignoring the rest.
fn parse_y_csv(text: &str) -> Result<Vec<f64>, CliError> {
    let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#'));
    let header = lines.next().ok_or_else(|| CliError::Parse("data file is empty".to_string()))?;
    let y_col = header
        .split(',')
        .position(|h| h.trim() == "y")
        .ok_or_else(|| CliError::Parse("data file has no column 'y'".to_string()))?;
    let mut y = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let field = line.split(',').nth(y_col).unwrap_or("").trim();
        y.push(field.parse::<f64>().map_err(|_| {
            CliError::Parse(format!("record {}: response is not a number: '{field}'", lineno + 1))
        })?);
    }
    Ok(y)
}

pub fn cmd_benchmark(a: &BenchmarkArgs) -> Result<(), CliError> {
    let mut run = RunConfig::new("benchmark");
    run.arg("data", &a.data)
        .arg("schema", &a.schema)
        .arg("g", a.g)
        .arg("npmle_max", a.npmle_max)
        .arg("seed", a.seed)
        .arg("tau", a.tau)
        .arg("robustness_g", &a.robustness_g);
    let text = read_to_string(&a.data)?;
    let y = match &a.schema {
        Some(path) => {
            let schema = load_schema(path)?;
            let (_, y) = parse_data_csv(&schema, &text)?;
            y.as_slice().to_vec()
        }
        None => parse_y_csv(&text)?,
    };
    let mut results = Vec::new();
    for family in [
        SimpleFamily::Gamma,
        SimpleFamily::Weibull,
        SimpleFamily::GenGamma,
        SimpleFamily::GenPareto,
    ] {
        results.push(fit_simple(&y, family)?);
    }
    results.push(fit_npmle_expmix(&y, a.npmle_max)?);
    results.push(fit_mixture_gamma_lomax(&y, a.g, a.seed)?);
    write_csv(&a.out_dir, "benchmarks.csv", &run, &comparison_csv(&results))?;
    write_json(&a.out_dir, "benchmarks.json", &run, "benchmarks", &results)?;
    if let Some(spec) = &a.robustness_g {
        let tau = a.tau.ok_or_else(|| {
            CliError::Parse("--robustness-g needs --tau to split body and tail".to_string())
        })?;
        let g_list: Vec<usize> = spec
            .split(',')
            .map(|t| {
                t.trim().parse::<usize>().map_err(|_| {
                    CliError::Parse(format!("--robustness-g: not a count: '{t}'"))
                })
            })
            .collect::<Result<_, _>>()?;
        let yv = DVector::from_vec(y);
        let robustness =
            tail_robustness_experiment(&yv, tau, &g_list, &FitConfig::default(), a.seed)?;
        write_csv(&a.out_dir, "tail_robustness.csv", &run, &robustness.to_csv())?;
    }
    Ok(())
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> Result<(), CliError> {
    let mut run = RunConfig::new("diagnose");
    run.arg("data", &a.data.data)
        .arg("schema", &a.data.schema)
        .arg("tau", a.data.tau)
        .arg("model", &a.model);
    let (_, ds) = load_dataset(&a.data)?;
    let data = FitData::from_dataset(&ds);
    let params = load_model(&a.model)?;
    let report = diagnostics(&data, &params, &DiagnosticsConfig::default())?;
    write_csv(&a.out_dir, "density.csv", &run, &report.density_csv())?;
    write_csv(&a.out_dir, "qq.csv", &run, &report.qq_csv())?;
    write_csv(&a.out_dir, "survival.csv", &run, &report.survival_csv())?;
    write_csv(&a.out_dir, "mean_excess.csv", &run, &report.mean_excess_csv())?;
    Ok(())
}

pub fn cmd_pipeline(a: &PipelineArgs) -> Result<(), CliError> {
    let mut run = RunConfig::new("pipeline");
    record_common(&mut run, &a.data, &a.engine);
    run.arg("g", a.g)
        .arg("penalty", a.penalty.name())
        .arg("scad_a", a.penalty.scad_a)
        .arg("criterion", criterion_name(a.criterion))
        .arg("folds", a.folds)
        .arg("lambda_grid", &a.lambda_grid)
        .arg("level", a.level);
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(CliError::Parse(format!("--level must be in (0,1), got {}", a.level)));
    }
    let (schema, ds) = load_dataset(&a.data)?;
    let data = FitData::from_dataset(&ds);
    let cfg = fit_config(&a.engine);
    let (d_mix, d_body, d_tail) = (data.x_mix.dim(), data.x_body.dim(), data.x_tail.dim());

    let init = init_params(&data, a.g, a.engine.seed)?;
    let pilot =
        fit(&data, init, &PartPlans::unpenalized(d_mix, d_body, d_tail), PartLambdas::zero(), &cfg)?;
    write_json(&a.out_dir, "pilot.json", &run, "params", &pilot.params)?;

    let latent = latent_snapshot(&data, &pilot.params, a.engine.seed)?;
    let plans = adaptive_plans(&schema, a.penalty.build()?, &data, &pilot.params);
    let grids = TuneGrids::uniform(&parse_grid(&a.lambda_grid)?);
    let tuning = tune_lambda(
        &data,
        &pilot.params,
        &latent,
        &plans,
        &grids,
        criterion(a.criterion, a.folds)?,
        &cfg,
        &AdjustConfig::default(),
        a.engine.seed,
    )?;
    write_csv(&a.out_dir, "tune.csv", &run, &tuning.to_csv())?;
    write_json(&a.out_dir, "tune.json", &run, "tuning", &tuning)?;

    let penalized = fit(&data, pilot.params.clone(), &plans, tuning.lambdas, &cfg)?;
    write_json(&a.out_dir, "model_penalized.json", &run, "params", &penalized.params)?;

    let latent2 = latent_snapshot(&data, &penalized.params, a.engine.seed)?;
    let adjusted =
        auto_adjust(&data, &penalized.params, &latent2, &plans, tuning.lambdas, &AdjustConfig::default());
    write_json(&a.out_dir, "model_adjusted.json", &run, "params", &adjusted.params)?;
    write_json(&a.out_dir, "adjust.json", &run, "audit", &adjusted.audit)?;

    let outcome = collapse_and_refit(&data, &schema, &adjusted.params, &cfg)?;
    write_json(&a.out_dir, "model_reduced.json", &run, "params", &outcome.full_params)?;
    let payload = ReductionReport {
        report: &outcome.report,
        full_params: &outcome.full_params,
        mix: &outcome.mix,
        body: &outcome.body,
        tail: &outcome.tail,
    };
    write_json(&a.out_dir, "reduction.json", &run, "reduction", &payload)?;

    let reduced_data = FitData {
        y: data.y,
        tau: data.tau,
        x_mix: &outcome.x_mix,
        x_body: &outcome.x_body,
        x_tail: &outcome.x_tail,
        body_idx: data.body_idx,
        tail_idx: data.tail_idx,
    };
    let reduced = &outcome.report.params;
    let labels =
        param_labels(reduced, &schema, &outcome.x_mix, &outcome.x_body, &outcome.x_tail);
    let info = fisher_info_reduced(&reduced_data, reduced)?;
    let table = wald_ci(reduced, &labels, &info, a.level)?;
    write_csv(&a.out_dir, "ci.csv", &run, &table.to_csv())?;
    write_json(&a.out_dir, "ci.json", &run, "intervals", &table)?;
    Ok(())
}
