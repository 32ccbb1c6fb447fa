//! Choice of the penalty level by extended BIC over a lambda path.

use std::collections::HashMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{GaplmError, Result};
use crate::penalty::{fit_penalized, fit_penalized_anchored, penalty_total, refit_support, FitReport, PenaltySpec};
use crate::qif::{QifModel, SolverOptions};
use crate::spline::group_norm;
use crate::types::{FitConfig, PenaltyKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EbicVariant {
    /// `Q_n` as the goodness-of-fit term.
    Qif,
    /// Minus twice the working-independence log-likelihood.
    Likelihood,
    /// Likelihood when the family has one, QIF otherwise.
    #[default]
    Auto,
}

impl std::str::FromStr for EbicVariant {
    type Err = GaplmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qif" => Ok(EbicVariant::Qif),
            "likelihood" | "loglik" => Ok(EbicVariant::Likelihood),
            "auto" => Ok(EbicVariant::Auto),
            other => Err(GaplmError::Config(format!("unknown EBIC variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathStrategy {
    /// Decreasing lambda, each fit started from the previous solution with
    /// removed coordinates restored to their unpenalized values.
    #[default]
    WarmStart,
    /// Every fit starts from the unpenalized estimate.
    ColdStart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningConfig {
    pub variant: EbicVariant,
    pub strategy: PathStrategy,
    /// Explicit grid; when absent a log-spaced grid below `lambda_max` is used.
    pub grid: Option<Vec<f64>>,
    pub n_grid: usize,
    /// Smallest grid value as a fraction of `lambda_max`.
    pub min_ratio: f64,
    /// Log-scale bisection steps used to locate `lambda_max`.
    pub bisection_steps: usize,
    /// Score and return the unpenalized refit on each fit's support instead
    /// of the penalized estimate.
    pub refit: bool,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            variant: EbicVariant::Auto,
            strategy: PathStrategy::WarmStart,
            grid: None,
            n_grid: 30,
            min_ratio: 1e-3,
            bisection_steps: 6,
            refit: true,
        }
    }
}

/// `ln C(n, k)`.
pub fn log_binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    statrs::function::factorial::ln_binomial(n as u64, k as u64)
}

/// The parts of one EBIC evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbicRecord {
    pub lambda: f64,
    pub variant: EbicVariant,
    /// `Q_n` or `-2 log L` at the estimate.
    pub fit_term: f64,
    pub n: usize,
    pub n_knots: usize,
    pub d_z: usize,
    pub d_x: usize,
    pub d_z_hat: usize,
    pub d_x_hat: usize,
    pub log_nu_z: f64,
    pub log_nu_x: f64,
    pub ebic: f64,
}

impl EbicRecord {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        lambda: f64,
        variant: EbicVariant,
        fit_term: f64,
        n: usize,
        n_knots: usize,
        d_z: usize,
        d_x: usize,
        d_z_hat: usize,
        d_x_hat: usize,
    ) -> Self {
        let mut r = Self {
            lambda,
            variant,
            fit_term,
            n,
            n_knots,
            d_z,
            d_x,
            d_z_hat,
            d_x_hat,
            log_nu_z: log_binomial(d_z, d_z_hat),
            log_nu_x: log_binomial(d_x, d_x_hat),
            ebic: 0.0,
        };
        r.ebic = r.recompute();
        r
    }

    /// `fit + log(n) d_z_hat + log nu_z + log(n) N_n d_x_hat + N_n log nu_x`.
    pub fn recompute(&self) -> f64 {
        let ln = (self.n as f64).ln();
        let nk = self.n_knots as f64;
        self.fit_term + ln * self.d_z_hat as f64 + self.log_nu_z + ln * nk * self.d_x_hat as f64 + nk * self.log_nu_x
    }
}

fn counts(report: &FitReport) -> (usize, usize) {
    (report.active.linear_indices().len(), report.active.group_indices().len())
}

/// EBIC with `Q_n` (penalty excluded) as the fit term.
pub fn ebic_qif(report: &FitReport, model: &QifModel) -> EbicRecord {
    let (dz, dx) = counts(report);
    let n_knots = model.spline().map_or(0, |s| s.n_interior());
    EbicRecord::assemble(
        report.penalty.lambda_linear,
        EbicVariant::Qif,
        report.qn,
        model.n_clusters(),
        n_knots,
        model.layout.d_z,
        model.layout.d_x,
        dz,
        dx,
    )
}

/// EBIC with minus twice the working-independence log-likelihood.
pub fn ebic_likelihood(report: &FitReport, model: &QifModel) -> Result<EbicRecord> {
    let y: Vec<f64> = model.responses().iter().flat_map(|y| y.iter().copied()).collect();
    let mu: Vec<f64> = model.fitted_means(&report.theta)?.iter().flat_map(|m| m.iter().copied()).collect();
    let fit_term = model.family.neg2_loglik(&y, &mu);
    let (dz, dx) = counts(report);
    let n_knots = model.spline().map_or(0, |s| s.n_interior());
    Ok(EbicRecord::assemble(
        report.penalty.lambda_linear,
        EbicVariant::Likelihood,
        fit_term,
        model.n_clusters(),
        n_knots,
        model.layout.d_z,
        model.layout.d_x,
        dz,
        dx,
    ))
}

pub fn ebic(report: &FitReport, model: &QifModel, variant: EbicVariant) -> Result<EbicRecord> {
    match variant {
        EbicVariant::Qif => Ok(ebic_qif(report, model)),
        EbicVariant::Likelihood | EbicVariant::Auto => ebic_likelihood(report, model),
    }
}

/// Whether every penalized coordinate of the fit is zero.
fn all_penalized_zero(report: &FitReport, spec: &PenaltySpec) -> bool {
    let lin = report.active.linear_indices();
    lin.iter().all(|j| spec.unpenalized_linear.contains(j)) && report.active.group_indices().is_empty()
}

/// Largest magnitude among penalized coefficients and group norms; a
/// starting guess for `lambda_max`.
fn coefficient_scale(model: &QifModel, theta: &DVector<f64>, spec: &PenaltySpec) -> f64 {
    let l = model.layout;
    let mut m: f64 = 0.0;
    for j in 0..l.d_z {
        if !spec.unpenalized_linear.contains(&j) {
            m = m.max(theta[j].abs());
        }
    }
    if let Some(s) = model.spline() {
        for (k, gram) in s.grams.iter().enumerate() {
            let r = l.group_range(k);
            m = m.max(group_norm(gram, &theta.rows(r.start, r.len()).into_owned()));
        }
    }
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Smallest lambda (up to the bisection resolution) at which the penalized
/// fit started from `theta0` removes every penalized component. Fits that
/// fail to converge count as not all zero.
pub fn lambda_max(
    model: &QifModel,
    spec: &PenaltySpec,
    theta0: &DVector<f64>,
    opts: &SolverOptions,
    bisection_steps: usize,
) -> Result<f64> {
    let zeroes = |lam: f64| -> bool {
        match fit_penalized(model, &spec.with_lambda(lam), Some(theta0), opts) {
            Ok(r) => all_penalized_zero(&r, spec),
            Err(_) => false,
        }
    };
    let mut hi = coefficient_scale(model, theta0, spec);
    let mut lo;
    if zeroes(hi) {
        lo = hi / 2.0;
        let mut tries = 0;
        while zeroes(lo) {
            hi = lo;
            lo /= 2.0;
            tries += 1;
            if tries > 60 {
                return Ok(hi);
            }
        }
    } else {
        lo = hi;
        hi *= 2.0;
        let mut tries = 0;
        while !zeroes(hi) {
            lo = hi;
            hi *= 2.0;
            tries += 1;
            if tries > 40 {
                return Err(GaplmError::Convergence { iterations: tries, trace: vec![hi] });
            }
        }
    }
    for _ in 0..bisection_steps {
        let mid = (lo * hi).sqrt();
        if zeroes(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `n_grid` log-spaced values from `lambda_max` down to `lambda_max * min_ratio`.
pub fn default_grid(lambda_max: f64, n_grid: usize, min_ratio: f64) -> Vec<f64> {
    if n_grid <= 1 {
        return vec![lambda_max];
    }
    let lr = min_ratio.ln();
    (0..n_grid)
        .map(|i| lambda_max * (lr * i as f64 / (n_grid - 1) as f64).exp())
        .collect()
}

#[derive(Clone, Debug)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub report: FitReport,
    /// One record per successfully fitted grid value, in decreasing lambda.
    pub records: Vec<EbicRecord>,
    /// Grid values whose fit failed, with the error message.
    pub failures: Vec<(f64, String)>,
    /// The unpenalized estimate used to start the path.
    pub unpenalized: DVector<f64>,
}

/// A cached refit re-labelled with another penalty.
fn with_penalty(report: &FitReport, spec: &PenaltySpec, model: &QifModel) -> FitReport {
    let grams = model.spline().map_or(&[][..], |s| &s.grams[..]);
    let pen = penalty_total(&report.theta, model.layout.d_z, spec, grams);
    FitReport {
        penalty: spec.clone(),
        penalized_objective: report.qn + model.n_clusters() as f64 * pen,
        ..report.clone()
    }
}

/// Fits every lambda on the grid and returns the EBIC minimiser; ties go to
/// the larger lambda.
pub fn select_lambda(model: &QifModel, cfg: &FitConfig, tuning: &TuningConfig) -> Result<LambdaSelection> {
    cfg.validate()?;
    let opts = SolverOptions::from(cfg);
    let base = PenaltySpec::from_config(cfg, 0.0);
    let unpen = model.fit_unpenalized(None, &opts)?;
    let theta0 = unpen.theta.clone();
    let mut grid = match &tuning.grid {
        Some(g) => g.clone(),
        None if cfg.penalty == PenaltyKind::None => vec![0.0],
        None => {
            let lmax = lambda_max(model, &base, &theta0, &opts, tuning.bisection_steps)?;
            default_grid(lmax, tuning.n_grid, tuning.min_ratio)
        }
    };
    if grid.is_empty() || grid.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(GaplmError::Config("lambda grid must be non-empty, finite and non-negative".into()));
    }
    grid.sort_by(|a, b| b.partial_cmp(a).expect("finite grid"));
    grid.dedup();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut best: Option<(f64, FitReport)> = None;
    let mut best_ebic = f64::INFINITY;
    let mut prev: Option<DVector<f64>> = None;
    let mut refits: HashMap<Vec<usize>, FitReport> = HashMap::new();
    for &lam in &grid {
        let spec = base.with_lambda(lam);
        let start = match (tuning.strategy, &prev) {
            (PathStrategy::WarmStart, Some(p)) => {
                DVector::from_fn(p.len(), |i, _| if p[i] == 0.0 { theta0[i] } else { p[i] })
            }
            _ => theta0.clone(),
        };
        let fit = if spec.is_inactive(model.layout.d_z, model.layout.d_x) {
            // the unpenalized estimate is already at hand
            fit_penalized(model, &spec, None, &opts)
        } else {
            fit_penalized_anchored(model, &spec, Some(&start), Some(&theta0), &opts)
        };
        let pen = match fit {
            Ok(r) => r,
            Err(e) => {
                failures.push((lam, e.to_string()));
                continue;
            }
        };
        prev = Some(pen.theta.clone());
        let full = pen.active.count() == model.layout.d_z + model.layout.d_x;
        let scored = if tuning.refit {
            let key = pen.active.coordinates(model.layout.d_z, model.layout.j_n);
            match refits.get(&key) {
                Some(r) => Ok(with_penalty(r, &spec, model)),
                None => refit_support(model, &pen, &opts).inspect(|r| {
                    refits.insert(key, r.clone());
                }),
            }
        } else {
            Ok(pen)
        };
        match scored.and_then(|r| ebic(&r, model, tuning.variant).map(|e| (r, e))) {
            Ok((report, rec)) => {
                if rec.ebic < best_ebic {
                    best_ebic = rec.ebic;
                    best = Some((lam, report));
                }
                records.push(rec);
            }
            Err(e) => failures.push((lam, e.to_string())),
        }
        // smaller lambdas keep every component and refit to the same estimate
        if tuning.refit && full {
            break;
        }
    }
    let Some((lambda, report)) = best else {
        return Err(GaplmError::Convergence { iterations: grid.len(), trace: Vec::new() });
    };
    Ok(LambdaSelection { lambda, report, records, failures, unpenalized: theta0 })
}
