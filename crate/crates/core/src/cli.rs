//! Command-line workflows: `simulate`, `fit`, `select` and `report`.
//!
//! Every command writes a `manifest.json` next to its outputs. The manifest
//! carries the fully resolved configuration, so passing it back through
//! `--config` reruns the command with identical settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_standardization, expand_person_period, load_loans, standardize, write_loans, CovariateStats,
    LoanRecord, PanelDataset, ALL_COVARIATES, DEFAULT_T_STUDY, NUMERIC_COVARIATES,
};
use crate::error::{Result, StjmError};
use crate::gmrf::Variant;
use crate::graph::AdjacencyGraph;
use crate::laplace::{fit, write_summary_csv, FitOptions, FitResult, GridStrategy, ParamSummary};
use crate::lgm::LatentModel;
use crate::mcmc::{diagnostics, run_mcmc_with, ChainResult, McmcOptions};
use crate::model::{build_model, ModelConfig, ModelDefinition};
use crate::selection::{cvdcl_mcmc, write_area_csv, write_report_csv, CvdclReport, HMethod, InlaSelector};
use crate::simulate::{simulate_temporal, simulate_stjm, to_loan_records, SimConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_DATA: i32 = 4;

pub const ORIGINATION_FILE: &str = "origination.csv";
pub const PERFORMANCE_FILE: &str = "performance.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FIT_SPEC_FILE: &str = "fit_spec.json";
pub const REPORT_FILE: &str = "cvdcl.csv";

/// Version string in `git describe` style.
pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Parser)]
#[command(name = "stjm", version, about = "Spatio-temporal joint models for loan prepayment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration, or a previous run's manifest.json.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Fit one model variant to a dataset.
    Fit(FitArgs),
    /// Compute cvDCL for one or more fits.
    Select(SelectArgs),
    /// Merge selection and fit outputs into side-by-side tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Directory holding origination.csv and performance.csv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "m1")]
    pub variant: String,
    /// `laplace` or `mcmc`.
    #[arg(long, default_value = "laplace")]
    pub method: String,
    /// Adjacency file; overrides `data.adjacency`.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Fit directories; the first is the baseline of the per-area differences.
    #[arg(required = true)]
    pub fits: Vec<PathBuf>,
    /// Comma-separated evaluation times.
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<usize>>,
    /// Posterior draws per grid point (`R`).
    #[arg(long)]
    pub draws: Option<usize>,
    /// `laplace`, `eb` or `quadrature` for Laplace fits.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Selection and/or fit directories.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Study length `T`; read from the simulation manifest, or the default, when absent.
    pub t_study: Option<usize>,
    /// Survival covariates; every non-constant covariate when absent.
    pub covariates: Option<Vec<String>>,
    pub standardize: bool,
    pub adjacency: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            t_study: None,
            covariates: None,
            standardize: true,
            adjacency: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub times: Vec<usize>,
    pub draws: usize,
    pub method: HMethod,
    /// Batches for the MCMC standard error.
    pub n_batches: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            times: vec![12, 18, 24, 30, 36],
            draws: 50,
            method: HMethod::Laplace,
            n_batches: 20,
        }
    }
}

/// Declarative configuration shared by all commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub simulate: SimConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub fit: FitOptions,
    pub mcmc: McmcOptions,
    pub select: SelectConfig,
}

impl RunConfig {
    /// Reads a TOML configuration or the `config` snapshot of a manifest.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| StjmError::Config(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: RunManifest =
                serde_json::from_str(&text).map_err(|e| StjmError::Config(format!("{}: {e}", path.display())))?;
            return Ok(m.config);
        }
        toml::from_str(&text).map_err(|e| StjmError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
    /// Command-specific arguments (input directories, variant, method).
    pub arguments: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Everything needed to rebuild a fitted model from its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub data_dir: PathBuf,
    pub adjacency: Option<PathBuf>,
    pub variant: Variant,
    /// `laplace` or `mcmc`.
    pub method: String,
    pub t_study: usize,
    pub covariates: Vec<String>,
    pub standardization: Vec<CovariateStats>,
    pub model: ModelConfig,
}

/// Exit code of an error: 2 configuration, 3 numerical, 4 data or selection.
pub fn exit_code(err: &StjmError) -> i32 {
    match err {
        StjmError::Config(_) | StjmError::Model(_) => EXIT_CONFIG,
        StjmError::NotPositiveDefinite { .. }
        | StjmError::NonConvergence { .. }
        | StjmError::Optimisation(_)
        | StjmError::InvalidHyperparameter(_)
        | StjmError::InvalidDimension(_)
        | StjmError::DegenerateConditional { .. } => EXIT_NUMERIC,
        StjmError::Data(_)
        | StjmError::ZeroVariance(_)
        | StjmError::NoneAtRisk(_)
        | StjmError::NotAtRisk { .. }
        | StjmError::InvalidGraph(_)
        | StjmError::Io(_)
        | StjmError::Csv(_)
        | StjmError::Json(_) => EXIT_DATA,
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    if let Some(n) = config.threads {
        if n == 0 {
            return Err(StjmError::Config("--threads must be at least 1".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialised; --threads {n} ignored");
        }
    }
    let started = Instant::now();
    let (name, out, outputs, arguments) = match &cli.command {
        Command::Simulate(a) => ("simulate", &a.out, cmd_simulate(&mut config, a)?, BTreeMap::new()),
        Command::Fit(a) => {
            let (outputs, args) = cmd_fit(&mut config, a)?;
            ("fit", &a.out, outputs, args)
        }
        Command::Select(a) => {
            let (outputs, args) = cmd_select(&mut config, a)?;
            ("select", &a.out, outputs, args)
        }
        Command::Report(a) => {
            let (outputs, args) = cmd_report(a)?;
            ("report", &a.out, outputs, args)
        }
    };
    let manifest = RunManifest {
        command: name.into(),
        config_path: cli.config.clone(),
        seed: config.seed,
        config,
        version: version_string(),
        outputs,
        duration_secs: started.elapsed().as_secs_f64(),
        arguments,
    };
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn require_seed(config: &RunConfig) -> Result<u64> {
    config
        .seed
        .ok_or_else(|| StjmError::Config("seed required: pass --seed or set `seed` in the config".into()))
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| StjmError::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn cmd_simulate(config: &mut RunConfig, args: &SimulateArgs) -> Result<Vec<PathBuf>> {
    let seed = require_seed(config)?;
    config.simulate.seed = Some(seed);
    config.simulate.validate().map_err(as_config)?;
    let graph = config.simulate.graph().map_err(as_config)?;
    let (data, truth) = match &graph {
        Some(g) => simulate_stjm(&config.simulate, g)?,
        None => simulate_temporal(&config.simulate)?,
    };
    create_out(&args.out)?;
    let files = [ORIGINATION_FILE, PERFORMANCE_FILE, TRUTH_FILE];
    write_loans(&to_loan_records(&data), args.out.join(files[0]), args.out.join(files[1]))?;
    truth.write_json(args.out.join(files[2]))?;
    let mut outputs: Vec<PathBuf> = files.iter().map(PathBuf::from).collect();
    if let Some(g) = &graph {
        g.write(args.out.join("adjacency.txt"))?;
        outputs.push("adjacency.txt".into());
    }
    info!("simulated {} loans, {} prepaid", data.n_loans(), data.loans.iter().filter(|l| l.prepaid).count());
    Ok(outputs)
}

fn as_config(e: StjmError) -> StjmError {
    match e {
        StjmError::Config(_) => e,
        other => StjmError::Config(other.to_string()),
    }
}

/// Study length recorded by the `simulate` run that produced `data_dir`, if any.
fn simulated_t_study(data_dir: &Path) -> Option<usize> {
    let m = RunManifest::read(data_dir.join(MANIFEST_FILE)).ok()?;
    (m.command == "simulate").then_some(m.config.simulate.t_study)
}

fn read_records(data_dir: &Path) -> Result<Vec<LoanRecord>> {
    let (o, p) = (data_dir.join(ORIGINATION_FILE), data_dir.join(PERFORMANCE_FILE));
    for f in [&o, &p] {
        if !f.exists() {
            return Err(StjmError::Data(format!("missing data file {}", f.display())));
        }
    }
    load_loans(o, p)
}

fn is_constant(records: &[LoanRecord], name: &str) -> Result<bool> {
    let first = match records.first() {
        Some(r) => r.covariate(name)?,
        None => return Ok(true),
    };
    for r in records {
        if r.covariate(name)? != first {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Loads, expands and standardises the data described by `config.data`.
pub fn prepare_dataset(data_dir: &Path, data: &DataConfig) -> Result<(PanelDataset, Vec<String>)> {
    let records = read_records(data_dir)?;
    let t_study = data
        .t_study
        .or_else(|| simulated_t_study(data_dir))
        .unwrap_or(DEFAULT_T_STUDY);
    let covariates = match &data.covariates {
        Some(c) => c.clone(),
        None => {
            let mut keep = Vec::new();
            for name in ALL_COVARIATES {
                if is_constant(&records, name)? {
                    info!("covariate `{name}` is constant; dropped");
                } else {
                    keep.push(name.to_string());
                }
            }
            keep
        }
    };
    let names: Vec<&str> = covariates.iter().map(String::as_str).collect();
    let mut panel = expand_person_period(&records, t_study, &names)?;
    if data.standardize {
        let numeric: Vec<&str> = names.iter().copied().filter(|n| NUMERIC_COVARIATES.contains(n)).collect();
        panel = standardize(panel, &numeric)?;
    }
    Ok((panel, covariates))
}

fn read_graph(path: &Option<PathBuf>) -> Result<Option<AdjacencyGraph>> {
    path.as_ref()
        .map(|p| {
            AdjacencyGraph::read(p).map_err(|e| StjmError::Config(format!("adjacency file {}: {e}", p.display())))
        })
        .transpose()
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Rebuilds the model a fit directory was produced from.
pub fn load_fit_model(fit_dir: &Path) -> Result<(FitSpec, ModelDefinition)> {
    let spec_path = fit_dir.join(FIT_SPEC_FILE);
    if !spec_path.exists() {
        return Err(StjmError::Data(format!("{} is not a fit directory (no {FIT_SPEC_FILE})", fit_dir.display())));
    }
    let spec: FitSpec = serde_json::from_str(&std::fs::read_to_string(spec_path)?)?;
    let records = read_records(&spec.data_dir)?;
    let names: Vec<&str> = spec.covariates.iter().map(String::as_str).collect();
    let panel = expand_person_period(&records, spec.t_study, &names)?;
    let panel = apply_standardization(panel, &spec.standardization)?;
    let model = build_model(panel, read_graph(&spec.adjacency)?, spec.variant, spec.model.clone())?;
    Ok((spec, model))
}

fn fixed_effect_summaries(model: &ModelDefinition, latent: &[ParamSummary]) -> Vec<ParamSummary> {
    latent[model.layout.global_offset()..].to_vec()
}

fn cmd_fit(
    config: &mut RunConfig,
    args: &FitArgs,
) -> Result<(Vec<PathBuf>, BTreeMap<String, serde_json::Value>)> {
    let variant: Variant = args.variant.parse()?;
    let method = args.method.to_ascii_lowercase();
    if method != "laplace" && method != "mcmc" {
        return Err(StjmError::Config(format!("unknown method `{}` (expected laplace or mcmc)", args.method)));
    }
    let seed = if method == "mcmc" { Some(require_seed(config)?) } else { config.seed };
    if args.adjacency.is_some() {
        config.data.adjacency = args.adjacency.clone();
    }
    if variant.has_spatial() && config.data.adjacency.is_none() {
        return Err(StjmError::Config(format!(
            "variant {variant} needs an adjacency graph: pass --adjacency <file> or set data.adjacency"
        )));
    }
    let graph = read_graph(&config.data.adjacency)?;
    let (panel, covariates) = prepare_dataset(&args.data, &config.data)?;
    config.model.variant = variant;
    config.model.covariates = covariates.clone();
    let spec = FitSpec {
        data_dir: absolute(&args.data),
        adjacency: config.data.adjacency.as_deref().map(absolute),
        variant,
        method: method.clone(),
        t_study: panel.t_study,
        covariates,
        standardization: panel.standardization.clone(),
        model: config.model.clone(),
    };
    let model = build_model(panel, graph, variant, config.model.clone())?;
    create_out(&args.out)?;
    std::fs::write(args.out.join(FIT_SPEC_FILE), serde_json::to_string_pretty(&spec)?)?;
    let mut outputs: Vec<PathBuf> = vec![FIT_SPEC_FILE.into()];

    let result = if method == "laplace" {
        fit(&model, &config.fit).map(|f| {
            let mut rows = f.hyper.clone();
            rows.extend(fixed_effect_summaries(&model, &f.latent));
            (rows, Some(f), None)
        })
    } else {
        let eb = FitOptions {
            strategy: GridStrategy::Eb,
            ..config.fit.clone()
        };
        fit(&model, &eb).and_then(|f| {
            config.mcmc.seed = seed.expect("seed checked above");
            config.mcmc.initial_theta = Some(f.theta_mode.clone());
            config.mcmc.proposal_covariance = Some(f.theta_covariance.clone());
            let chain = run_mcmc_with(&model, &config.mcmc)?;
            let names = model.latent_coordinate_names();
            let mut rows = chain.hyper_summaries();
            rows.extend(chain.latent_summaries(&names, model.layout.global_offset()..model.dim()));
            Ok((rows, None, Some(chain)))
        })
    };
    let (rows, laplace, chain) = match result {
        Ok(r) => r,
        Err(e) => {
            if exit_code(&e) == EXIT_NUMERIC {
                write_diagnostic_dump(&args.out, &e)?;
            }
            return Err(e);
        }
    };
    write_summary_csv(args.out.join("summary.csv"), &rows)?;
    outputs.push("summary.csv".into());
    if let Some(f) = laplace {
        f.write_json(args.out.join("fit.json"))?;
        outputs.push("fit.json".into());
    }
    if let Some(chain) = chain {
        chain.write(&args.out, &model.latent_coordinate_names())?;
        let named: Vec<(String, usize)> = model
            .latent_coordinate_names()
            .into_iter()
            .enumerate()
            .skip(model.layout.global_offset())
            .map(|(k, n)| (n, k))
            .collect();
        let diag = diagnostics(&chain, &named)?;
        std::fs::write(args.out.join("diagnostics.json"), serde_json::to_string_pretty(&diag)?)?;
        outputs.extend(["chain.json", "chain.csv", "diagnostics.json"].map(PathBuf::from));
    }
    let mut arguments = BTreeMap::new();
    arguments.insert("data".into(), serde_json::json!(spec.data_dir));
    arguments.insert("variant".into(), serde_json::json!(variant.as_str()));
    arguments.insert("method".into(), serde_json::json!(method));
    Ok((outputs, arguments))
}

fn write_diagnostic_dump(out: &Path, err: &StjmError) -> Result<()> {
    let trace = match err {
        StjmError::NonConvergence { trace, .. } => trace.clone(),
        _ => Vec::new(),
    };
    let dump = serde_json::json!({ "error": err.to_string(), "newton_step_trace": trace });
    std::fs::write(out.join("error.json"), serde_json::to_string_pretty(&dump)?)?;
    Ok(())
}

fn label_of(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn cmd_select(
    config: &mut RunConfig,
    args: &SelectArgs,
) -> Result<(Vec<PathBuf>, BTreeMap<String, serde_json::Value>)> {
    if let Some(t) = &args.times {
        config.select.times = t.clone();
    }
    if let Some(r) = args.draws {
        config.select.draws = r;
    }
    if let Some(m) = &args.method {
        config.select.method = m.parse()?;
    }
    let sel = config.select.clone();
    if sel.times.is_empty() {
        return Err(StjmError::Config("no evaluation times given".into()));
    }
    if sel.draws == 0 {
        return Err(StjmError::Config("--draws must be at least 1".into()));
    }
    let mut reports = Vec::with_capacity(args.fits.len());
    let mut seed = None;
    for dir in &args.fits {
        let (spec, model) = load_fit_model(dir)?;
        for &t in &sel.times {
            if model.dataset.at_risk(t) == 0 {
                return Err(StjmError::NoneAtRisk(t));
            }
        }
        let label = label_of(dir);
        let report = if spec.method == "mcmc" {
            let chain = ChainResult::read(dir, |k, x| model.hyper_to_user(k, x))?;
            let estimates = sel
                .times
                .iter()
                .map(|&t| cvdcl_mcmc(&model, &chain, t, sel.n_batches))
                .collect::<Result<Vec<_>>>()?;
            CvdclReport {
                model: label,
                method: "mcmc".into(),
                estimates,
            }
        } else {
            let s = *seed.get_or_insert(require_seed(config)?);
            let f = FitResult::read_json(dir.join("fit.json"))?;
            let selector = InlaSelector::new(&model, &f)?;
            let estimates = sel
                .times
                .iter()
                .map(|&t| selector.cvdcl(t, sel.draws, sel.method, s))
                .collect::<Result<Vec<_>>>()?;
            CvdclReport {
                model: label,
                method: sel.method.tag().into(),
                estimates,
            }
        };
        for e in &report.estimates {
            info!("{} t={} N_t={} cvDCL={:.4} (se {:.2e})", report.model, e.t, e.n_at_risk, e.estimate, e.mc_se);
        }
        reports.push(report);
    }
    create_out(&args.out)?;
    write_report_csv(args.out.join(REPORT_FILE), &reports)?;
    let mut outputs: Vec<PathBuf> = vec![REPORT_FILE.into()];
    for &t in &sel.times {
        let name = format!("areas_t{t}.csv");
        write_area_csv(args.out.join(&name), t, &reports)?;
        outputs.push(name.into());
    }
    std::fs::write(args.out.join("cvdcl.json"), serde_json::to_string_pretty(&reports)?)?;
    outputs.push("cvdcl.json".into());
    let mut arguments = BTreeMap::new();
    arguments.insert(
        "fits".into(),
        serde_json::json!(args.fits.iter().map(|d| absolute(d)).collect::<Vec<_>>()),
    );
    Ok((outputs, arguments))
}

#[derive(Debug, Deserialize)]
struct ReportRow {
    t: usize,
    #[serde(rename = "N_t")]
    n_t: usize,
    model: String,
    method: String,
    estimate: f64,
    mc_se: f64,
}

#[derive(Debug, Deserialize)]
struct SummaryRow {
    name: String,
    mean: f64,
    sd: f64,
}

fn cmd_report(args: &ReportArgs) -> Result<(Vec<PathBuf>, BTreeMap<String, serde_json::Value>)> {
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut params: Vec<(String, Vec<SummaryRow>)> = Vec::new();
    for dir in &args.dirs {
        let report = dir.join(REPORT_FILE);
        let summary = dir.join("summary.csv");
        if report.exists() {
            for r in csv::Reader::from_path(&report)?.deserialize() {
                rows.push(r?);
            }
        } else if summary.exists() {
            let rs = csv::Reader::from_path(&summary)?
                .deserialize()
                .collect::<std::result::Result<Vec<SummaryRow>, _>>()?;
            params.push((label_of(dir), rs));
        } else {
            return Err(StjmError::Data(format!(
                "{} holds neither {REPORT_FILE} nor summary.csv",
                dir.display()
            )));
        }
    }
    create_out(&args.out)?;
    let mut outputs = Vec::new();
    if !rows.is_empty() {
        let mut columns: Vec<(String, String)> = rows.iter().map(|r| (r.model.clone(), r.method.clone())).collect();
        columns.dedup();
        columns.sort();
        columns.dedup();
        let mut times: Vec<(usize, usize)> = rows.iter().map(|r| (r.t, r.n_t)).collect();
        times.sort_unstable();
        times.dedup_by_key(|x| x.0);
        let mut w = csv::Writer::from_path(args.out.join("report.csv"))?;
        let mut header = vec!["t".to_string(), "N_t".to_string()];
        for (m, meth) in &columns {
            header.push(format!("{m}:{meth}"));
            header.push(format!("{m}:{meth}:mc_se"));
        }
        w.write_record(&header)?;
        let mut table = String::from("| t | N_t |");
        for (m, meth) in &columns {
            table.push_str(&format!(" {m} ({meth}) |"));
        }
        table.push_str(&format!("\n|---|---|{}\n", "---|".repeat(columns.len())));
        for &(t, n) in &times {
            let mut rec = vec![t.to_string(), n.to_string()];
            table.push_str(&format!("| {t} | {n} |"));
            for (m, meth) in &columns {
                match rows.iter().find(|r| r.t == t && &r.model == m && &r.method == meth) {
                    Some(r) => {
                        rec.push(format!("{:.6}", r.estimate));
                        rec.push(format!("{:.6e}", r.mc_se));
                        table.push_str(&format!(" {:.4} ({:.1e}) |", r.estimate, r.mc_se));
                    }
                    None => {
                        rec.extend([String::new(), String::new()]);
                        table.push_str(" |");
                    }
                }
            }
            w.write_record(&rec)?;
            table.push('\n');
        }
        w.flush()?;
        println!("{table}");
        std::fs::write(args.out.join("report.md"), table)?;
        outputs.extend(["report.csv", "report.md"].map(PathBuf::from));
    }
    if !params.is_empty() {
        let mut names: Vec<String> = Vec::new();
        for (_, rs) in &params {
            for r in rs {
                if !names.contains(&r.name) {
                    names.push(r.name.clone());
                }
            }
        }
        let mut w = csv::Writer::from_path(args.out.join("parameters.csv"))?;
        let mut header = vec!["name".to_string()];
        for (label, _) in &params {
            header.push(format!("{label}:mean"));
            header.push(format!("{label}:sd"));
        }
        w.write_record(&header)?;
        for n in &names {
            let mut rec = vec![n.clone()];
            for (_, rs) in &params {
                match rs.iter().find(|r| &r.name == n) {
                    Some(r) => rec.extend([format!("{:.6}", r.mean), format!("{:.6}", r.sd)]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        outputs.push("parameters.csv".into());
    }
    let mut arguments = BTreeMap::new();
    arguments.insert(
        "dirs".into(),
        serde_json::json!(args.dirs.iter().map(|d| absolute(d)).collect::<Vec<_>>()),
    );
    Ok((outputs, arguments))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_partition_error_classes() {
        assert_eq!(exit_code(&StjmError::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&StjmError::NotPositiveDefinite { pivot: 3 }), EXIT_NUMERIC);
        assert_eq!(
            exit_code(&StjmError::NonConvergence {
                iterations: 5,
                last_step: 1.0,
                trace: vec![]
            }),
            EXIT_NUMERIC
        );
        assert_eq!(exit_code(&StjmError::NoneAtRisk(60)), EXIT_DATA);
        assert_eq!(exit_code(&StjmError::Data("x".into())), EXIT_DATA);
    }

    #[test]
    fn config_sections_default_independently() {
        let c: RunConfig = toml::from_str("seed = 4\n[simulate]\nn_loans = 30\n[select]\ntimes = [6]\n").unwrap();
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.simulate.n_loans, 30);
        assert_eq!(c.simulate.t_study, SimConfig::default().t_study);
        assert_eq!(c.select.times, vec![6]);
        assert_eq!(c.select.draws, 50);
        assert!(c.data.standardize);
    }

    #[test]
    fn malformed_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "[simulate]\nn_loans = \"many\"\n").unwrap();
        let err = RunConfig::read(&p).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }
}
