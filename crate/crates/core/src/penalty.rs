//! SCAD / LASSO penalties and the doubly penalized QIF solve.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GaplmError, Result};
use crate::linalg::{self, solve_spd, submatrix, subvector};
use crate::qif::{QifModel, SolverOptions, MAX_HALVINGS};
use crate::spline::group_norm;
use crate::types::{CnUpdate, FitConfig, PenaltyKind, ThetaLayout};

pub const DEFAULT_SCAD_A: f64 = 3.7;

/// `p'_lambda(t)` for SCAD.
pub fn scad_derivative(t: f64, lambda: f64, a: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(GaplmError::Domain(format!("SCAD derivative needs t >= 0, got {t}")));
    }
    if t <= lambda {
        return Ok(lambda);
    }
    Ok((a * lambda - t).max(0.0) / (a - 1.0))
}

/// The SCAD penalty itself (the primitive of [`scad_derivative`]).
pub fn scad_penalty(t: f64, lambda: f64, a: f64) -> f64 {
    let t = t.abs();
    if t <= lambda {
        lambda * t
    } else if t <= a * lambda {
        -(t * t - 2.0 * a * lambda * t + lambda * lambda) / (2.0 * (a - 1.0))
    } else {
        (a + 1.0) * lambda * lambda / 2.0
    }
}

/// `p''_lambda(t)` for `t > 0`: `-1/(a-1)` on the concave SCAD segment and
/// zero elsewhere.
pub fn scad_second_derivative(t: f64, lambda: f64, a: f64) -> f64 {
    if t > lambda && t < a * lambda {
        -1.0 / (a - 1.0)
    } else {
        0.0
    }
}

/// `p'_lambda(t) = lambda` for the L1 penalty, including at `t = 0`.
pub fn lasso_derivative(_t: f64, lambda: f64) -> f64 {
    lambda
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    /// `lambda_1`, applied to the group norms `||gamma_l||_{K_l}`.
    pub lambda_group: f64,
    /// `lambda_2`, applied to `|beta_l|`.
    pub lambda_linear: f64,
    pub scad_a: f64,
    /// Z columns exempt from penalization; always includes the intercept.
    pub unpenalized_linear: Vec<usize>,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, lambda: f64) -> Self {
        Self {
            kind,
            lambda_group: lambda,
            lambda_linear: lambda,
            scad_a: DEFAULT_SCAD_A,
            unpenalized_linear: vec![0],
        }
    }

    pub fn scad(lambda: f64) -> Self {
        Self::new(PenaltyKind::Scad, lambda)
    }

    pub fn from_config(cfg: &FitConfig, lambda: f64) -> Self {
        Self { scad_a: cfg.scad_a, ..Self::new(cfg.penalty, lambda) }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda_group: lambda, lambda_linear: lambda, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_group >= 0.0 && self.lambda_linear >= 0.0) {
            return Err(GaplmError::Config("penalty levels must be non-negative".into()));
        }
        if !(self.scad_a > 2.0) {
            return Err(GaplmError::Config(format!("scad_a must exceed 2, got {}", self.scad_a)));
        }
        Ok(())
    }

    fn penalizes_linear(&self, j: usize) -> bool {
        self.kind != PenaltyKind::None && self.lambda_linear > 0.0 && !self.unpenalized_linear.contains(&j)
    }

    fn penalizes_groups(&self) -> bool {
        self.kind != PenaltyKind::None && self.lambda_group > 0.0
    }

    /// True when no coordinate carries a penalty.
    pub fn is_inactive(&self, d_z: usize, d_x: usize) -> bool {
        !(0..d_z).any(|j| self.penalizes_linear(j)) && !(d_x > 0 && self.penalizes_groups())
    }

    pub fn derivative(&self, t: f64, lambda: f64) -> Result<f64> {
        match self.kind {
            PenaltyKind::Scad => scad_derivative(t, lambda, self.scad_a),
            PenaltyKind::Lasso => Ok(lasso_derivative(t, lambda)),
            PenaltyKind::None => Ok(0.0),
        }
    }

    pub fn second_derivative(&self, t: f64, lambda: f64) -> f64 {
        match self.kind {
            PenaltyKind::Scad => scad_second_derivative(t, lambda, self.scad_a),
            PenaltyKind::Lasso | PenaltyKind::None => 0.0,
        }
    }

    pub fn value(&self, t: f64, lambda: f64) -> f64 {
        match self.kind {
            PenaltyKind::Scad => scad_penalty(t, lambda, self.scad_a),
            PenaltyKind::Lasso => lambda * t.abs(),
            PenaltyKind::None => 0.0,
        }
    }
}

/// Which linear coefficients and spline groups are still in the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub linear: Vec<bool>,
    pub groups: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
}

impl ActiveSet {
    pub fn full(d_z: usize, d_x: usize) -> Self {
        Self { linear: vec![true; d_z], groups: vec![true; d_x], iterations: 0, converged: false }
    }

    pub fn count(&self) -> usize {
        self.linear.iter().chain(&self.groups).filter(|&&a| a).count()
    }

    pub fn linear_indices(&self) -> Vec<usize> {
        self.linear.iter().enumerate().filter_map(|(j, &a)| a.then_some(j)).collect()
    }

    pub fn group_indices(&self) -> Vec<usize> {
        self.groups.iter().enumerate().filter_map(|(j, &a)| a.then_some(j)).collect()
    }

    /// Packed coordinates of the active part of theta.
    pub fn coordinates(&self, d_z: usize, j_n: usize) -> Vec<usize> {
        let mut idx = self.linear_indices();
        for l in self.group_indices() {
            idx.extend(d_z + l * j_n..d_z + (l + 1) * j_n);
        }
        idx
    }
}

/// The local quadratic approximation weight `Lambda(theta)` over the full
/// packed parameter; inactive and unpenalized coordinates get zero blocks.
pub fn lqa_matrix(
    theta: &DVector<f64>,
    d_z: usize,
    active: &ActiveSet,
    penalty: &PenaltySpec,
    grams: &[DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    let d_x = active.groups.len();
    let j_n = grams.first().map_or(0, |k| k.nrows());
    let p = d_z + d_x * j_n;
    if theta.len() != p || active.linear.len() != d_z || grams.len() != d_x {
        return Err(GaplmError::Dimension("theta, active set and Gram matrices disagree".into()));
    }
    let mut lam = DMatrix::zeros(p, p);
    for j in active.linear_indices() {
        if !penalty.penalizes_linear(j) {
            continue;
        }
        let t = theta[j].abs();
        if t == 0.0 {
            return Err(GaplmError::Contract(format!("active linear coefficient {j} is exactly zero")));
        }
        lam[(j, j)] = penalty.derivative(t, penalty.lambda_linear)? / t;
    }
    if penalty.penalizes_groups() {
        for l in active.group_indices() {
            let start = d_z + l * j_n;
            let g = theta.rows(start, j_n).into_owned();
            let norm = group_norm(&grams[l], &g);
            if norm == 0.0 {
                return Err(GaplmError::Contract(format!("active group {l} has zero norm")));
            }
            let scale = penalty.derivative(norm, penalty.lambda_group)? / norm;
            lam.view_mut((start, start), (j_n, j_n)).copy_from(&(&grams[l] * scale));
        }
    }
    Ok(lam)
}

/// Hessian of the penalty at `theta` on the active coordinates. It agrees
/// with [`lqa_matrix`] except for the curvature along each coefficient and
/// group direction.
pub fn penalty_hessian(
    theta: &DVector<f64>,
    d_z: usize,
    active: &ActiveSet,
    penalty: &PenaltySpec,
    grams: &[DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    let mut h = lqa_matrix(theta, d_z, active, penalty, grams)?;
    let j_n = grams.first().map_or(0, |k| k.nrows());
    for j in active.linear_indices() {
        if penalty.penalizes_linear(j) {
            h[(j, j)] = penalty.second_derivative(theta[j].abs(), penalty.lambda_linear);
        }
    }
    if penalty.penalizes_groups() {
        for l in active.group_indices() {
            let start = d_z + l * j_n;
            let kg = &grams[l] * theta.rows(start, j_n);
            let r = group_norm(&grams[l], &theta.rows(start, j_n).into_owned());
            let s = penalty.derivative(r, penalty.lambda_group)? / r;
            let c = (penalty.second_derivative(r, penalty.lambda_group) - s) / (r * r);
            let mut block = h.view_mut((start, start), (j_n, j_n));
            block += &kg * kg.transpose() * c;
        }
    }
    Ok(h)
}

/// `sum_l p(|beta_l|) + sum_l p(||gamma_l||_K)` over penalized coordinates.
pub fn penalty_total(theta: &DVector<f64>, d_z: usize, penalty: &PenaltySpec, grams: &[DMatrix<f64>]) -> f64 {
    let mut s = 0.0;
    for j in 0..d_z {
        if penalty.penalizes_linear(j) {
            s += penalty.value(theta[j].abs(), penalty.lambda_linear);
        }
    }
    if penalty.penalizes_groups() {
        let j_n = grams.first().map_or(0, |k| k.nrows());
        for (l, k) in grams.iter().enumerate() {
            let g = theta.rows(d_z + l * j_n, j_n).into_owned();
            s += penalty.value(group_norm(k, &g), penalty.lambda_group);
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub objective_before: f64,
    pub objective_after: f64,
    pub active_count: usize,
}

/// Outcome of one penalized (or unpenalized) solve.
#[derive(Clone, Debug)]
pub struct FitReport {
    /// Packed estimate with exact zeros at removed coordinates.
    pub theta: DVector<f64>,
    pub active: ActiveSet,
    pub penalty: PenaltySpec,
    /// Unpenalized `Q_n` at the estimate.
    pub qn: f64,
    /// `Q_n + n sum p_lambda` at the estimate.
    pub penalized_objective: f64,
    pub records: Vec<IterationRecord>,
    pub iterations: usize,
}

impl FitReport {
    pub fn selection(&self) -> Selection {
        Selection {
            linear: self.active.linear_indices().into_iter().collect(),
            groups: self.active.group_indices().into_iter().collect(),
        }
    }

    /// Objective after every accepted step, starting from the initial value.
    pub fn trace(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.records.len() + 1);
        if let Some(r) = self.records.first() {
            t.push(r.objective_before);
        }
        t.extend(self.records.iter().map(|r| r.objective_after));
        t
    }
}

fn grams_of(model: &QifModel) -> Result<Vec<DMatrix<f64>>> {
    if model.layout.d_x == 0 {
        return Ok(Vec::new());
    }
    model
        .spline()
        .map(|s| s.grams.clone())
        .ok_or_else(|| GaplmError::Capability("group penalty needs a model built with a spline system".into()))
}

/// Zeroes every active penalized block for which zero satisfies the
/// stationarity condition of the local quadratic model with the other
/// coordinates held fixed: `|g_j| <= n p'(0+)` for a coefficient and
/// `g^T K^{-1} g <= (n p'(0+))^2` for a group, where `g` is the model
/// gradient at the zeroed block. Returns `None` when nothing qualifies.
#[allow(clippy::too_many_arguments)]
fn kkt_zero_candidate(
    theta: &DVector<f64>,
    grad: &DVector<f64>,
    hess: &DMatrix<f64>,
    active: &ActiveSet,
    penalty: &PenaltySpec,
    k_inv: &[DMatrix<f64>],
    d_z: usize,
    j_n: usize,
    n: f64,
) -> Option<(DVector<f64>, ActiveSet)> {
    let mut cand = theta.clone();
    let mut zeroed = active.clone();
    let mut any = false;
    let lin_bound = n * penalty.derivative(0.0, penalty.lambda_linear).ok()?;
    for j in active.linear_indices() {
        if !penalty.penalizes_linear(j) {
            continue;
        }
        let g0 = grad[j] - hess[(j, j)] * theta[j];
        if g0.abs() <= lin_bound {
            cand[j] = 0.0;
            zeroed.linear[j] = false;
            any = true;
        }
    }
    if penalty.penalizes_groups() {
        let bound = n * penalty.derivative(0.0, penalty.lambda_group).ok()?;
        for l in active.group_indices() {
            let start = d_z + l * j_n;
            let g = grad.rows(start, j_n) - hess.view((start, start), (j_n, j_n)) * theta.rows(start, j_n);
            if (g.transpose() * &k_inv[l] * &g)[(0, 0)] <= bound * bound {
                cand.rows_mut(start, j_n).fill(0.0);
                zeroed.groups[l] = false;
                any = true;
            }
        }
    }
    any.then_some((cand, zeroed))
}

/// Step halvings tried on the exact-curvature Newton step before falling
/// back to the LQA step. Halved exact steps zigzag when the Gauss-Newton
/// Hessian is inaccurate, so only the full step is tried.
const EXACT_HALVINGS: usize = 0;

/// Doubly penalized QIF estimate by thresholded LQA-Newton iterations.
pub fn fit_penalized(
    model: &QifModel,
    penalty: &PenaltySpec,
    theta0: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<FitReport> {
    fit_penalized_anchored(model, penalty, theta0, None, opts)
}

/// As [`fit_penalized`], with a frozen `C_n` evaluated at `anchor` instead
/// of at the starting value.
pub fn fit_penalized_anchored(
    model: &QifModel,
    penalty: &PenaltySpec,
    theta0: Option<&DVector<f64>>,
    anchor: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<FitReport> {
    penalty.validate()?;
    let d_z = model.layout.d_z;
    let d_x = model.layout.d_x;
    let j_n = model.layout.j_n;
    let n = model.n_clusters() as f64;
    let grams = grams_of(model)?;

    if penalty.is_inactive(d_z, d_x) {
        let fit = model.fit_unpenalized(theta0, opts)?;
        let records = fit
            .trace
            .windows(2)
            .map(|w| IterationRecord { objective_before: w[0], objective_after: w[1], active_count: d_z + d_x })
            .collect();
        return Ok(FitReport {
            theta: fit.theta,
            active: ActiveSet { iterations: fit.iterations, converged: true, ..ActiveSet::full(d_z, d_x) },
            penalty: penalty.clone(),
            qn: fit.objective,
            penalized_objective: fit.objective,
            records,
            iterations: fit.iterations,
        });
    }

    let mut theta = match theta0 {
        Some(t) => t.clone(),
        None => model.fit_unpenalized(None, opts)?.theta,
    };
    let frozen = match opts.penalized_cn_update {
        CnUpdate::Frozen => Some(model.cn_solver(&model.evaluate(anchor.unwrap_or(&theta), false)?.c)?),
        CnUpdate::Varying => None,
    };
    let mut active = ActiveSet::full(d_z, d_x);
    let mut records = Vec::new();
    let objective = |th: &DVector<f64>| -> Result<(f64, f64)> {
        let q = match &frozen {
            Some(w) => model.objective_with(th, w)?,
            None => model.objective(th)?,
        };
        Ok((q, q + n * penalty_total(th, d_z, penalty, &grams)))
    };

    let threshold = |theta: &mut DVector<f64>, active: &mut ActiveSet| {
        for j in 0..d_z {
            if active.linear[j] && penalty.penalizes_linear(j) && theta[j].abs() <= opts.epsilon {
                theta[j] = 0.0;
                active.linear[j] = false;
            }
        }
        if penalty.penalizes_groups() {
            for l in 0..d_x {
                if !active.groups[l] {
                    continue;
                }
                let g = theta.rows(d_z + l * j_n, j_n).into_owned();
                if group_norm(&grams[l], &g) <= opts.epsilon {
                    theta.rows_mut(d_z + l * j_n, j_n).fill(0.0);
                    active.groups[l] = false;
                }
            }
        }
    };

    let k_inv: Vec<DMatrix<f64>> = grams
        .iter()
        .map(|k| k.clone().cholesky().map(|c| c.inverse()))
        .collect::<Option<_>>()
        .ok_or_else(|| GaplmError::Singular("Gram matrix is not positive definite".into()))?;

    for iter in 1..=opts.max_iter {
        threshold(&mut theta, &mut active);
        let mut lq = model.local_quadratic(&theta, frozen.as_ref())?;
        let mut before = lq.q + n * penalty_total(&theta, d_z, penalty, &grams);
        if let Some((cand, zeroed)) = kkt_zero_candidate(&theta, &lq.grad, &lq.hess, &active, penalty, &k_inv, d_z, j_n, n) {
            if let Ok((_, f)) = objective(&cand) {
                if f.is_finite() && f <= before {
                    theta = cand;
                    active = zeroed;
                    lq = model.local_quadratic(&theta, frozen.as_ref())?;
                    before = f;
                }
            }
        }
        let idx = active.coordinates(d_z, j_n);
        if idx.is_empty() {
            active.iterations = iter;
            active.converged = true;
            records.push(IterationRecord { objective_before: before, objective_after: before, active_count: 0 });
            break;
        }
        let lam = lqa_matrix(&theta, d_z, &active, penalty, &grams)?;
        let lam_s = submatrix(&lam, &idx) * n;
        let h = submatrix(&lq.hess, &idx) + &lam_s;
        let theta_s = subvector(&theta, &idx);
        let rhs = subvector(&lq.grad, &idx) + &lam_s * &theta_s;
        let step = solve_spd(&h, &rhs, "penalized Newton matrix")?;

        // full Newton step with the exact penalty curvature first, then the
        // LQA step halved until the objective does not increase
        let exact = submatrix(&lq.hess, &idx) + submatrix(&penalty_hessian(&theta, d_z, &active, penalty, &grams)?, &idx) * n;
        let mut directions = Vec::with_capacity(2);
        if let Some(ch) = exact.cholesky() {
            directions.push((ch.solve(&rhs), EXACT_HALVINGS));
        }
        directions.push((step, MAX_HALVINGS));
        let mut accepted = None;
        'search: for (dir, halvings) in &directions {
            let mut s = 1.0;
            for _ in 0..=*halvings {
                let mut cand = theta.clone();
                for (k, &c) in idx.iter().enumerate() {
                    cand[c] -= s * dir[k];
                }
                if let Ok((_, f)) = objective(&cand) {
                    if f.is_finite() && f <= before {
                        accepted = Some((cand, f));
                        break 'search;
                    }
                }
                s *= 0.5;
            }
        }
        let Some((cand, after)) = accepted else {
            records.push(IterationRecord { objective_before: before, objective_after: before, active_count: active.count() });
            active.iterations = iter;
            active.converged = true;
            break;
        };
        let moved = (&cand - &theta).norm();
        theta = cand;
        records.push(IterationRecord { objective_before: before, objective_after: after, active_count: active.count() });
        if moved <= opts.tol {
            active.iterations = iter;
            active.converged = true;
            break;
        }
    }
    if !active.converged {
        return Err(GaplmError::Convergence {
            iterations: opts.max_iter,
            trace: records.iter().map(|r| r.objective_after).collect(),
        });
    }
    threshold(&mut theta, &mut active);
    let (_, pen) = objective(&theta)?;
    let qn = model.objective(&theta)?;
    let iterations = active.iterations;
    Ok(FitReport { theta, active, penalty: penalty.clone(), qn, penalized_objective: pen, records, iterations })
}

/// Unpenalized QIF refit on the support of a penalized fit, started from
/// the penalized estimate. The returned report keeps the active set and
/// penalty of `report`.
pub fn refit_support(model: &QifModel, report: &FitReport, opts: &SolverOptions) -> Result<FitReport> {
    let l = model.layout;
    let coords = report.active.coordinates(l.d_z, l.j_n);
    if coords.is_empty() {
        return Ok(report.clone());
    }
    let layout = ThetaLayout::new(report.active.linear_indices().len(), report.active.group_indices().len(), l.j_n);
    let sub = model.restrict(&coords, layout)?;
    let fit = sub.fit_unpenalized(Some(&subvector(&report.theta, &coords)), opts)?;
    let mut theta = DVector::zeros(l.len());
    for (k, &c) in coords.iter().enumerate() {
        theta[c] = fit.theta[k];
    }
    let qn = model.objective(&theta)?;
    let grams = grams_of(model)?;
    let penalized_objective = qn + model.n_clusters() as f64 * penalty_total(&theta, l.d_z, &report.penalty, &grams);
    let active_count = report.active.count();
    let records = fit
        .trace
        .windows(2)
        .map(|w| IterationRecord { objective_before: w[0], objective_after: w[1], active_count })
        .collect();
    Ok(FitReport {
        theta,
        active: report.active.clone(),
        penalty: report.penalty.clone(),
        qn,
        penalized_objective,
        records,
        iterations: fit.iterations,
    })
}

/// Selected linear columns and spline components.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub linear: BTreeSet<usize>,
    pub groups: BTreeSet<usize>,
}

impl Selection {
    pub fn new(linear: impl IntoIterator<Item = usize>, groups: impl IntoIterator<Item = usize>) -> Self {
        Self { linear: linear.into_iter().collect(), groups: groups.into_iter().collect() }
    }

    pub fn is_superset(&self, other: &Selection) -> bool {
        self.linear.is_superset(&other.linear) && self.groups.is_superset(&other.groups)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionClass {
    Correct,
    Over,
    Under,
}

/// Correct when `selected == truth`, over when it strictly contains the
/// truth, under whenever some true component is missing.
pub fn classify_selection(selected: &Selection, truth: &Selection) -> SelectionClass {
    if !selected.is_superset(truth) {
        SelectionClass::Under
    } else if selected == truth {
        SelectionClass::Correct
    } else {
        SelectionClass::Over
    }
}

/// Fits at a fixed `lambda` from scratch.
pub fn fit_at_lambda(model: &QifModel, cfg: &FitConfig, lambda: f64) -> Result<FitReport> {
    fit_penalized(model, &PenaltySpec::from_config(cfg, lambda), None, &SolverOptions::from(cfg))
}

/// Symmetric PSD check used by tests and diagnostics.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    linalg::max_abs_diff(m, &m.transpose()) <= tol && linalg::min_eigenvalue(m) >= -tol
}
