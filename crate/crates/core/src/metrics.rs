//! Model error, in-sample and holdout prediction error, and study summaries.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{GaplmError, Result};
use crate::family::Family;
use crate::penalty::SelectionClass;
use crate::qif::QifModel;
use crate::spline::SplineSystem;
use crate::types::{ClusterDataset, Theta};

/// Anything that maps one observation's covariates to a marginal mean.
pub trait MeanPredictor {
    fn family(&self) -> Family;

    /// Linear predictor for covariate rows `x` (length `d_x`) and `z` (length `d_z`).
    fn eta(&self, x: &[f64], z: &[f64]) -> Result<f64>;

    fn mean(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        Ok(self.family().mu(self.eta(x, z)?))
    }
}

/// A fitted additive predictor that may use only some of the columns of the
/// data it is evaluated on.
#[derive(Clone, Debug)]
pub struct FittedMean {
    pub family: Family,
    pub spline: Option<SplineSystem>,
    /// Column of the evaluation data used by each nonparametric component.
    pub x_cols: Vec<usize>,
    /// Column of the evaluation data used by each linear coefficient.
    pub z_cols: Vec<usize>,
    pub theta: Theta,
}

impl FittedMean {
    pub fn new(family: Family, spline: Option<SplineSystem>, x_cols: Vec<usize>, z_cols: Vec<usize>, theta: Theta) -> Result<Self> {
        if x_cols.len() != theta.gamma.len() || z_cols.len() != theta.beta.len() {
            return Err(GaplmError::Dimension(format!(
                "{} x columns / {} z columns for {} groups and {} coefficients",
                x_cols.len(),
                z_cols.len(),
                theta.gamma.len(),
                theta.beta.len()
            )));
        }
        if !x_cols.is_empty() && spline.is_none() {
            return Err(GaplmError::Capability("nonparametric components need a spline system".into()));
        }
        Ok(Self { family, spline, x_cols, z_cols, theta })
    }

    /// Predictor for a model fitted on all columns of its data.
    pub fn from_model(model: &QifModel, theta: &DVector<f64>) -> Result<Self> {
        let th = model.unpack(theta)?;
        let x_cols = (0..th.gamma.len()).collect();
        let z_cols = (0..th.beta.len()).collect();
        Self::new(model.family, model.spline().cloned(), x_cols, z_cols, th)
    }

    /// Same as [`FittedMean::from_model`] for a model fitted on the listed
    /// subset of columns.
    pub fn from_submodel(model: &QifModel, theta: &DVector<f64>, x_cols: &[usize], z_cols: &[usize]) -> Result<Self> {
        let th = model.unpack(theta)?;
        Self::new(model.family, model.spline().cloned(), x_cols.to_vec(), z_cols.to_vec(), th)
    }

    /// Linear coefficients with the intercept (data column 0) re-expressed
    /// for components satisfying `int_0^1 alpha_l = 0` instead of a zero
    /// training mean. The predictor itself is unchanged.
    pub fn unit_centered_beta(&self) -> Result<Vec<f64>> {
        let mut beta: Vec<f64> = self.theta.beta.iter().copied().collect();
        let Some(k) = self.z_cols.iter().position(|&j| j == 0) else {
            return Ok(beta);
        };
        if let Some(s) = &self.spline {
            for (l, g) in self.theta.gamma.iter().enumerate() {
                beta[k] += s.integral(l, g)?;
            }
        }
        Ok(beta)
    }
}

impl MeanPredictor for FittedMean {
    fn family(&self) -> Family {
        self.family
    }

    fn eta(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        let mut eta = 0.0;
        for (b, &j) in self.theta.beta.iter().zip(&self.z_cols) {
            eta += b * z.get(j).ok_or_else(|| GaplmError::Dimension(format!("z has no column {j}")))?;
        }
        if let Some(s) = &self.spline {
            for (l, (g, &c)) in self.theta.gamma.iter().zip(&self.x_cols).enumerate() {
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let xv = *x.get(c).ok_or_else(|| GaplmError::Dimension(format!("x has no column {c}")))?;
                eta += s.eval_function(l, g, xv)?;
            }
        }
        Ok(eta)
    }
}

fn for_each_obs(ds: &ClusterDataset, mut f: impl FnMut(&[f64], &[f64], f64) -> Result<()>) -> Result<usize> {
    let mut x = vec![0.0; ds.d_x];
    let mut z = vec![0.0; ds.d_z];
    let mut count = 0;
    for c in &ds.clusters {
        for t in 0..c.size() {
            for l in 0..ds.d_x {
                x[l] = c.x[(t, l)];
            }
            for j in 0..ds.d_z {
                z[j] = c.z[(t, j)];
            }
            f(&x, &z, c.y[t])?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(GaplmError::Domain("no observations".into()));
    }
    Ok(count)
}

/// Mean squared difference of fitted and true means over the test set, on
/// the response scale.
pub fn model_error(fit: &dyn MeanPredictor, truth: &dyn MeanPredictor, test: &ClusterDataset) -> Result<f64> {
    let mut sum = 0.0;
    let n = for_each_obs(test, |x, z, _| {
        let d = fit.mean(x, z)? - truth.mean(x, z)?;
        sum += d * d;
        Ok(())
    })?;
    Ok(sum / n as f64)
}

/// In-sample mean squared error `sum (y - y_hat)^2 / N`.
pub fn msee(fit: &dyn MeanPredictor, ds: &ClusterDataset) -> Result<f64> {
    let mut sum = 0.0;
    let n = for_each_obs(ds, |x, z, y| {
        let d = y - fit.mean(x, z)?;
        sum += d * d;
        Ok(())
    })?;
    Ok(sum / n as f64)
}

/// Mean squared prediction error on a holdout sample.
pub fn mspe(fit: &dyn MeanPredictor, holdout: &ClusterDataset) -> Result<f64> {
    msee(fit, holdout)
}

/// `||f||_n = sqrt(mean f^2)` over the supplied evaluations.
pub fn empirical_norm(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Result of one simulated replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub lambda: Option<f64>,
    pub selected_linear: Vec<usize>,
    pub selected_groups: Vec<usize>,
    pub class: Option<SelectionClass>,
    pub model_error: Option<f64>,
    /// Estimated linear coefficients in the full design's coordinates.
    pub beta: Vec<f64>,
    pub failure: Option<String>,
}

impl ReplicationRecord {
    pub fn failed(replication: usize, msg: String) -> Self {
        Self {
            replication,
            lambda: None,
            selected_linear: Vec::new(),
            selected_groups: Vec::new(),
            class: None,
            model_error: None,
            beta: Vec::new(),
            failure: Some(msg),
        }
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }
}

/// Aggregate over replications. Failed replications count towards
/// `failure_rate` only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub label: String,
    pub replications: usize,
    pub correct: f64,
    pub over: f64,
    pub under: f64,
    pub failure_rate: f64,
    pub failures: usize,
    /// Mean model error over successful replications.
    pub mme: f64,
    pub me_sd: f64,
    pub beta_mean: Vec<f64>,
    pub beta_sd: Vec<f64>,
    pub records: Vec<ReplicationRecord>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let ss = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    (m, (ss / (n - 1.0)).sqrt())
}

impl StudySummary {
    /// Aggregates the records in the order given.
    pub fn from_records(label: impl Into<String>, records: Vec<ReplicationRecord>) -> Self {
        let r = records.len();
        let rf = r.max(1) as f64;
        let count = |c: SelectionClass| records.iter().filter(|x| x.class == Some(c)).count() as f64 / rf;
        let ok: Vec<&ReplicationRecord> = records.iter().filter(|x| !x.is_failure()).collect();
        let failures = r - ok.len();
        let mes: Vec<f64> = ok.iter().filter_map(|x| x.model_error).collect();
        let (mme, me_sd) = mean_sd(&mes);
        let d_z = ok.iter().map(|x| x.beta.len()).max().unwrap_or(0);
        let mut beta_mean = Vec::with_capacity(d_z);
        let mut beta_sd = Vec::with_capacity(d_z);
        for j in 0..d_z {
            let col: Vec<f64> = ok.iter().filter_map(|x| x.beta.get(j).copied()).collect();
            let (m, s) = mean_sd(&col);
            beta_mean.push(m);
            beta_sd.push(s);
        }
        Self {
            label: label.into(),
            replications: r,
            correct: count(SelectionClass::Correct),
            over: count(SelectionClass::Over),
            under: count(SelectionClass::Under),
            failure_rate: failures as f64 / rf,
            failures,
            mme,
            me_sd,
            beta_mean,
            beta_sd,
            records,
        }
    }
}
