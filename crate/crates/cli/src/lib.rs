//! Command-line front end for `gaplm`: fits and selects on clustered CSV
//! data, runs simulation studies and emits simulated datasets.
//!
//! Every number written here comes from a library call; this crate only
//! parses input, merges configuration and serializes results.

pub mod args;
pub mod data;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use gaplm::metrics::FittedMean;
use gaplm::penalty::{fit_at_lambda, FitReport};
use gaplm::qif::QifModel;
use gaplm::sim::{replication_rng, run_study, DesignId, MethodVariant, SimDesign, StudyConfig, TEST_CLUSTERS};
use gaplm::tuning::{ebic, select_lambda, EbicRecord, TuningConfig};
use gaplm::{FitConfig, GaplmError, PenaltyKind, WorkingStructure};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use args::{Cli, Command};
pub use data::{read_dataset, write_dataset, NamedDataset};

/// Seed used when neither a flag, the config file nor `GAPLM_SEED` sets one.
pub const DEFAULT_SEED: u64 = 20240601;
pub const SEED_ENV: &str = "GAPLM_SEED";
pub const GRID_POINTS: usize = 101;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("{message}; objective trace written to {}", trace.display())]
    Convergence { message: String, trace: PathBuf },
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Io(_) | CliError::Csv(_) => 2,
            CliError::Convergence { .. } | CliError::Estimation(_) => 3,
        }
    }
}

impl From<GaplmError> for CliError {
    fn from(e: GaplmError) -> Self {
        match e {
            GaplmError::Dimension(_)
            | GaplmError::Domain(_)
            | GaplmError::Config(_)
            | GaplmError::Contract(_) => CliError::Input(e.to_string()),
            _ => CliError::Estimation(e.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Everything a run can be configured with. Loaded from a JSON file and then
/// overridden by command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: Format,
    pub fit: FitConfig,
    pub tuning: TuningConfig,
    /// Add the sandwich covariance of the linear coefficients to fit output.
    pub covariance: bool,
    /// Tidy CSV of the fitted functions on the output grid.
    pub alpha_csv: Option<PathBuf>,
    pub design: DesignId,
    /// Numbers of clusters; empty uses the design default.
    pub sizes: Vec<usize>,
    pub cluster_size: Option<usize>,
    /// Working structures of a study; empty uses `fit.structure`.
    pub structures: Vec<WorkingStructure>,
    pub method: MethodVariant,
    pub replications: usize,
    pub seed: Option<u64>,
    /// Worker threads of a study; 0 uses all cores.
    pub threads: usize,
    pub test_clusters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            format: Format::Csv,
            fit: FitConfig::default(),
            tuning: TuningConfig::default(),
            covariance: false,
            alpha_csv: None,
            design: DesignId::Example1,
            sizes: Vec::new(),
            cluster_size: None,
            structures: Vec::new(),
            method: MethodVariant::Scad,
            replications: 100,
            seed: None,
            threads: 0,
            test_clusters: TEST_CLUSTERS,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))
    }

    /// Explicit seed, else `GAPLM_SEED`, else [`DEFAULT_SEED`].
    pub fn resolved_seed(&self) -> Result<u64, CliError> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| CliError::Input(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }
}

/// Serialized result of `fit` and `select`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub family: gaplm::Family,
    pub structure: WorkingStructure,
    pub degree: usize,
    pub penalty: PenaltyKind,
    pub lambda: f64,
    pub n_clusters: usize,
    pub n_obs: usize,
    pub interior_knots: usize,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    /// Linear coefficients with the nonparametric components centred over
    /// the training observations.
    pub beta: Vec<f64>,
    /// The same coefficients with each component integrating to zero on `[0, 1]`.
    pub beta_unit_centered: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub grid: Vec<f64>,
    /// `alpha[l][k]` is component `l` at `grid[k]`, centred like `beta`.
    pub alpha: Vec<Vec<f64>>,
    pub active_linear: Vec<String>,
    pub active_nonparametric: Vec<String>,
    pub ebic: EbicRecord,
    pub qn: f64,
    pub penalized_objective: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
    /// EBIC along the lambda path when more than one value was tried.
    pub path: Vec<EbicRecord>,
    pub path_failures: Vec<(f64, String)>,
    pub beta_covariance: Option<Vec<Vec<f64>>>,
}

fn unit_grid() -> Vec<f64> {
    (0..GRID_POINTS).map(|k| k as f64 / (GRID_POINTS - 1) as f64).collect()
}

fn describe(
    named: &NamedDataset,
    model: &QifModel,
    cfg: &RunConfig,
    lambda: f64,
    report: &FitReport,
    path: Vec<EbicRecord>,
    path_failures: Vec<(f64, String)>,
) -> Result<FitOutput, CliError> {
    let ds = &named.data;
    let theta = model.unpack(&report.theta)?;
    let grid = unit_grid();
    let alpha = (0..ds.d_x)
        .map(|l| model.extract_alpha(&report.theta, l, &grid))
        .collect::<gaplm::Result<Vec<_>>>()?;
    let beta_unit_centered = FittedMean::from_model(model, &report.theta)?.unit_centered_beta()?;
    let beta_covariance = if cfg.covariance {
        let c = model.beta_covariance(&report.theta)?;
        Some(c.row_iter().map(|r| r.iter().copied().collect()).collect())
    } else {
        None
    };
    Ok(FitOutput {
        family: cfg.fit.family,
        structure: cfg.fit.structure,
        degree: cfg.fit.degree,
        penalty: cfg.fit.penalty,
        lambda,
        n_clusters: ds.n_clusters(),
        n_obs: ds.n_obs(),
        interior_knots: model.spline().map_or(0, |s| s.n_interior()),
        x_names: named.x_names.clone(),
        z_names: named.z_names.clone(),
        beta: theta.beta.iter().copied().collect(),
        beta_unit_centered,
        gamma: theta.gamma.iter().map(|g| g.iter().copied().collect()).collect(),
        grid,
        alpha,
        active_linear: report.active.linear_indices().into_iter().map(|j| named.z_names[j].clone()).collect(),
        active_nonparametric: report.active.group_indices().into_iter().map(|l| named.x_names[l].clone()).collect(),
        ebic: ebic(report, model, cfg.tuning.variant)?,
        qn: report.qn,
        penalized_objective: report.penalized_objective,
        iterations: report.iterations,
        trace: report.trace(),
        path,
        path_failures,
        beta_covariance,
    })
}

/// Fits at the single configured lambda, or picks the EBIC minimiser when
/// the grid has several values.
pub fn fit_dataset(named: &NamedDataset, cfg: &RunConfig) -> Result<FitOutput, GaplmOrCli> {
    let model = QifModel::from_config(&named.data, &cfg.fit)?;
    if let [lambda] = cfg.fit.lambda_grid[..] {
        let report = fit_at_lambda(&model, &cfg.fit, lambda)?;
        return Ok(describe(named, &model, cfg, lambda, &report, Vec::new(), Vec::new())?);
    }
    let tuning = TuningConfig { grid: Some(cfg.fit.lambda_grid.clone()), ..cfg.tuning.clone() };
    let sel = select_lambda(&model, &cfg.fit, &tuning)?;
    Ok(describe(named, &model, cfg, sel.lambda, &sel.report, sel.records, sel.failures)?)
}

/// Runs the lambda path of `cfg.tuning` (a default grid below `lambda_max`
/// unless one is given) and returns the EBIC choice.
pub fn select_dataset(named: &NamedDataset, cfg: &RunConfig) -> Result<FitOutput, GaplmOrCli> {
    let model = QifModel::from_config(&named.data, &cfg.fit)?;
    let sel = select_lambda(&model, &cfg.fit, &cfg.tuning)?;
    Ok(describe(named, &model, cfg, sel.lambda, &sel.report, sel.records, sel.failures)?)
}

/// Library errors are kept intact until a convergence trace can be saved.
#[derive(Debug, Error)]
pub enum GaplmOrCli {
    #[error(transparent)]
    Lib(#[from] GaplmError),
    #[error(transparent)]
    Cli(#[from] CliError),
}

/// One row of a study table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub design: DesignId,
    pub method: MethodVariant,
    pub structure: String,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub degree: usize,
    pub replications: usize,
    #[serde(rename = "C")]
    pub correct: f64,
    #[serde(rename = "O")]
    pub over: f64,
    #[serde(rename = "U")]
    pub under: f64,
    pub failures: usize,
    #[serde(rename = "MME")]
    pub mme: f64,
    pub me_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub seed: u64,
    pub rows: Vec<StudyRow>,
    pub summaries: Vec<gaplm::metrics::StudySummary>,
}

/// One study per (structure, n) cell, all with the same seed.
pub fn study(cfg: &RunConfig) -> Result<StudyOutput, CliError> {
    let seed = cfg.resolved_seed()?;
    let structures = if cfg.structures.is_empty() { vec![cfg.fit.structure] } else { cfg.structures.clone() };
    let sizes: Vec<Option<usize>> =
        if cfg.sizes.is_empty() { vec![None] } else { cfg.sizes.iter().copied().map(Some).collect() };
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &structure in &structures {
        for &n in &sizes {
            let design = SimDesign::build(cfg.design, n, cfg.cluster_size)?;
            let fit = FitConfig { structure, family: design.truth.family, ..cfg.fit.clone() };
            let (n, t) = (design.n, design.t);
            let sc = StudyConfig {
                design,
                method: cfg.method,
                fit,
                tuning: cfg.tuning.clone(),
                replications: cfg.replications,
                seed,
                threads: cfg.threads,
                test_clusters: cfg.test_clusters,
            };
            let s = run_study(&sc)?;
            rows.push(StudyRow {
                design: cfg.design,
                method: cfg.method,
                structure: structure.to_string(),
                n,
                t,
                degree: cfg.fit.degree,
                replications: s.replications,
                correct: s.correct,
                over: s.over,
                under: s.under,
                failures: s.failures,
                mme: s.mme,
                me_sd: s.me_sd,
            });
            summaries.push(s);
        }
    }
    Ok(StudyOutput { seed, rows, summaries })
}

/// Training data of replication 0 of a study with the same seed.
pub fn simulate(cfg: &RunConfig) -> Result<gaplm::ClusterDataset, CliError> {
    let n = cfg.sizes.first().copied();
    let design = SimDesign::build(cfg.design, n, cfg.cluster_size)?;
    let mut rng = replication_rng(cfg.resolved_seed()?, 0);
    Ok(design.generate(&mut rng)?)
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
            CliError::Input(format!("cannot create {}: {e}", p.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), CliError> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_alpha_csv(out: &FitOutput, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(sink(Some(path))?);
    w.write_record(["covariate", "x", "alpha"])?;
    for (name, values) in out.x_names.iter().zip(&out.alpha) {
        for (x, a) in out.grid.iter().zip(values) {
            w.write_record([name.clone(), x.to_string(), a.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Where the objective trace of a failed fit goes.
pub fn trace_path(output: Option<&Path>) -> PathBuf {
    match output {
        Some(p) => p.with_extension("trace.json"),
        None => PathBuf::from("gaplm-trace.json"),
    }
}

fn finish_fit(result: Result<FitOutput, GaplmOrCli>, cfg: &RunConfig) -> Result<(), CliError> {
    let out = match result {
        Ok(o) => o,
        Err(GaplmOrCli::Lib(e @ GaplmError::Convergence { .. })) => {
            let GaplmError::Convergence { iterations, trace } = &e else { unreachable!() };
            let path = trace_path(cfg.output.as_deref());
            write_json(&serde_json::json!({ "iterations": iterations, "trace": trace }), Some(&path))?;
            return Err(CliError::Convergence { message: e.to_string(), trace: path });
        }
        Err(GaplmOrCli::Lib(e)) => return Err(e.into()),
        Err(GaplmOrCli::Cli(e)) => return Err(e),
    };
    write_json(&out, cfg.output.as_deref())?;
    if let Some(p) = &cfg.alpha_csv {
        write_alpha_csv(&out, p)?;
    }
    Ok(())
}

fn load_input(cfg: &RunConfig) -> Result<NamedDataset, CliError> {
    let path = cfg.input.as_ref().ok_or_else(|| CliError::Input("no input file given".into()))?;
    let f = File::open(path).map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    read_dataset(io::BufReader::new(f))
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let (command, cfg) = cli.into_config()?;
    match command {
        args::CommandKind::Fit | args::CommandKind::Select => {
            cfg.fit.validate()?;
            let named = load_input(&cfg)?;
            let result = if command == args::CommandKind::Fit {
                fit_dataset(&named, &cfg)
            } else {
                select_dataset(&named, &cfg)
            };
            finish_fit(result, &cfg)
        }
        args::CommandKind::Study => {
            let out = study(&cfg)?;
            match cfg.format {
                Format::Json => write_json(&out, cfg.output.as_deref()),
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(sink(cfg.output.as_deref())?);
                    for r in &out.rows {
                        w.serialize(r)?;
                    }
                    w.flush()?;
                    Ok(())
                }
            }
        }
        args::CommandKind::Simulate => {
            let ds = simulate(&cfg)?;
            write_dataset(&ds, sink(cfg.output.as_deref())?)
        }
    }
}
