//! Command-line flags and their merge onto [`RunConfig`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gaplm::sim::{DesignId, MethodVariant};
use gaplm::tuning::EbicVariant;
use gaplm::{Family, PenaltyKind, WorkingStructure};

use crate::{CliError, Format, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "gaplm", version, about = "Additive partial linear models for clustered data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit at one lambda, or pick the EBIC best of a given lambda grid.
    Fit(FitArgs),
    /// Fit along a lambda path and pick the EBIC best.
    Select(FitArgs),
    /// Run a replication study and write a C/O/U/MME table.
    Study(StudyArgs),
    /// Write one simulated training dataset as CSV.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandKind {
    Fit,
    Select,
    Study,
    Simulate,
}

#[derive(Debug, Default, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Seed; defaults to GAPLM_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub family: Option<Family>,
    /// Working correlation; a comma list for `study`.
    #[arg(long, value_delimiter = ',')]
    pub structure: Vec<WorkingStructure>,
    /// Spline degree.
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub penalty: Option<PenaltyKind>,
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long)]
    pub scad_a: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub ebic: Option<EbicVariant>,
    /// Number of automatic lambda values.
    #[arg(long)]
    pub n_grid: Option<usize>,
    /// Score penalized estimates directly instead of support refits.
    #[arg(long)]
    pub no_refit: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Clustered CSV with header cluster,t,y,x1..,z1.. (z1 = intercept).
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Include the sandwich covariance of the linear coefficients.
    #[arg(long)]
    pub covariance: bool,
    /// Also write the fitted functions as tidy CSV.
    #[arg(long)]
    pub alpha_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    #[arg(long)]
    pub design: Option<DesignId>,
    /// Numbers of clusters, comma-separated.
    #[arg(short, long, value_delimiter = ',')]
    pub n: Vec<usize>,
    /// Cluster size.
    #[arg(short, long)]
    pub t: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub method: Option<MethodVariant>,
    /// Number of replications.
    #[arg(short = 'R', long)]
    pub replications: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub test_clusters: Option<usize>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub design: DesignArgs,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.out.is_some() {
        cfg.output = common.out.clone();
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    Ok(cfg)
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig, many_structures: bool) -> Result<(), CliError> {
        let f = &mut cfg.fit;
        set(&mut f.family, self.family);
        set(&mut f.degree, self.degree);
        set(&mut f.penalty, self.penalty);
        set(&mut f.scad_a, self.scad_a);
        set(&mut f.tol, self.tol);
        set(&mut f.max_iter, self.max_iter);
        set(&mut f.ridge, self.ridge);
        set(&mut cfg.tuning.variant, self.ebic);
        set(&mut cfg.tuning.n_grid, self.n_grid);
        if self.no_refit {
            cfg.tuning.refit = false;
        }
        if !self.lambda.is_empty() {
            f.lambda_grid = self.lambda.clone();
            cfg.tuning.grid = Some(self.lambda.clone());
        }
        match (&self.structure[..], many_structures) {
            ([], _) => {}
            (list, true) => cfg.structures = list.to_vec(),
            ([s], false) => cfg.fit.structure = *s,
            _ => return Err(CliError::Input("a fit takes exactly one working structure".into())),
        }
        Ok(())
    }
}

impl DesignArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.design, self.design);
        if !self.n.is_empty() {
            cfg.sizes = self.n.clone();
        }
        if self.t.is_some() {
            cfg.cluster_size = self.t;
        }
    }
}

impl Cli {
    /// The command and its configuration after applying flag overrides.
    pub fn into_config(self) -> Result<(CommandKind, RunConfig), CliError> {
        match self.command {
            Command::Fit(a) => Ok((CommandKind::Fit, a.config()?)),
            Command::Select(a) => Ok((CommandKind::Select, a.config()?)),
            Command::Study(a) => {
                let mut cfg = base(&a.common)?;
                a.design.apply(&mut cfg);
                a.model.apply(&mut cfg, true)?;
                set(&mut cfg.method, a.method);
                set(&mut cfg.replications, a.replications);
                set(&mut cfg.threads, a.threads);
                set(&mut cfg.test_clusters, a.test_clusters);
                set(&mut cfg.format, a.format);
                Ok((CommandKind::Study, cfg))
            }
            Command::Simulate(a) => {
                let mut cfg = base(&a.common)?;
                a.design.apply(&mut cfg);
                Ok((CommandKind::Simulate, cfg))
            }
        }
    }
}

impl FitArgs {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = base(&self.common)?;
        if self.input.is_some() {
            cfg.input = self.input.clone();
        }
        self.model.apply(&mut cfg, false)?;
        if self.covariance {
            cfg.covariance = true;
        }
        if self.alpha_csv.is_some() {
            cfg.alpha_csv = self.alpha_csv.clone();
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> (CommandKind, RunConfig) {
        Cli::try_parse_from(args).unwrap().into_config().unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let (k, cfg) = parse(&["gaplm", "fit", "d.csv", "--structure", "ind", "--lambda", "0,0.1", "--degree", "3"]);
        assert_eq!(k, CommandKind::Fit);
        assert_eq!(cfg.input, Some(PathBuf::from("d.csv")));
        assert_eq!(cfg.fit.structure, WorkingStructure::Independence);
        assert_eq!(cfg.fit.lambda_grid, vec![0.0, 0.1]);
        assert_eq!(cfg.fit.degree, 3);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"replications": 7, "sizes": [100], "fit": {"degree": 2}}"#).unwrap();
        let p = path.to_str().unwrap();
        let (_, cfg) = parse(&["gaplm", "study", "--config", p, "-R", "3"]);
        assert_eq!(cfg.replications, 3);
        assert_eq!(cfg.sizes, vec![100]);
        assert_eq!(cfg.fit.degree, 2);
    }

    #[test]
    fn study_takes_structure_lists() {
        let (_, cfg) = parse(&["gaplm", "study", "--structure", "ec,ind", "-n", "100,200", "--method", "oracle"]);
        assert_eq!(cfg.structures, vec![WorkingStructure::Exchangeable, WorkingStructure::Independence]);
        assert_eq!(cfg.sizes, vec![100, 200]);
        assert_eq!(cfg.method, MethodVariant::Oracle);
    }

    #[test]
    fn fit_rejects_structure_lists() {
        let cli = Cli::try_parse_from(["gaplm", "fit", "d.csv", "--structure", "ec,ind"]).unwrap();
        assert!(matches!(cli.into_config(), Err(CliError::Input(_))));
    }
}
