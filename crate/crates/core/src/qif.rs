//! Extended scores, the quadratic inference function and its Gauss-Newton
//! minimiser.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::correlation::{BasisCache, WorkingStructure};
use crate::error::{GaplmError, Result};
use crate::family::Family;
use crate::linalg::{self, cholesky_with_fallback, pinv_symmetric, solve_spd, PINV_RCOND};
use crate::spline::SplineSystem;
use crate::types::{ClusterDataset, CnUpdate, FitConfig, Theta, ThetaLayout};

/// Maximum number of step halvings per Newton iteration.
pub const MAX_HALVINGS: usize = 30;

/// Everything needed to evaluate `Q_n` for one dataset: the per-cluster
/// designs `D_i = [Z_i | B_i]`, responses and basis matrices.
#[derive(Clone, Debug)]
pub struct QifModel {
    pub family: Family,
    pub layout: ThetaLayout,
    /// Relative ridge for `C_n`; zero means pseudo-inverse.
    pub ridge: f64,
    designs: Vec<DMatrix<f64>>,
    ys: Vec<DVector<f64>>,
    basis: BasisCache,
    k: usize,
    spline: Option<SplineSystem>,
}

/// Moments at one parameter value.
#[derive(Clone, Debug)]
pub struct QifEval {
    /// `G_n`, length `K d_n`.
    pub g: DVector<f64>,
    /// `C_n`, `K d_n x K d_n`.
    pub c: DMatrix<f64>,
    /// Extended scores, one row per cluster.
    pub scores: DMatrix<f64>,
    /// `dG_n / d theta`, present when requested.
    pub gdot: Option<DMatrix<f64>>,
}

/// Objective value with its Gauss-Newton gradient and Hessian.
#[derive(Clone, Debug)]
pub struct LocalQuadratic {
    pub q: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// Applies `(C_n + delta I)^{-1}` (or the pseudo-inverse when `delta = 0`).
#[derive(Clone, Debug)]
pub struct CnSolver {
    kind: CnKind,
}

#[derive(Clone, Debug)]
enum CnKind {
    Chol(Cholesky<f64, Dyn>),
    Pinv(DMatrix<f64>),
    Zero(usize),
}

impl CnSolver {
    pub fn new(c: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let dim = c.nrows();
        if c.iter().all(|&v| v == 0.0) {
            return Ok(Self { kind: CnKind::Zero(dim) });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(GaplmError::Numeric("C_n has non-finite entries".into()));
        }
        if ridge == 0.0 {
            return Ok(Self { kind: CnKind::Pinv(pinv_symmetric(c, PINV_RCOND)) });
        }
        let delta = ridge * linalg::trace(c) / dim as f64;
        let chol = cholesky_with_fallback(c, delta)
            .ok_or_else(|| GaplmError::Singular("C_n + delta I is not positive definite".into()))?;
        Ok(Self { kind: CnKind::Chol(chol) })
    }

    pub fn solve(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.kind {
            CnKind::Chol(ch) => Ok(ch.solve(g)),
            CnKind::Pinv(p) => Ok(p * g),
            CnKind::Zero(_) => {
                if g.iter().any(|&v| v != 0.0) {
                    Err(GaplmError::Singular("C_n is zero but G_n is not".into()))
                } else {
                    Ok(DVector::zeros(g.len()))
                }
            }
        }
    }

    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.kind {
            CnKind::Chol(ch) => ch.solve(m),
            CnKind::Pinv(p) => p * m,
            CnKind::Zero(d) => DMatrix::zeros(*d, m.ncols()),
        }
    }

    /// `g^T W g`.
    pub fn quad(&self, g: &DVector<f64>) -> Result<f64> {
        Ok(g.dot(&self.solve(g)?).max(0.0))
    }
}

/// Result of the unpenalized solve.
#[derive(Clone, Debug)]
pub struct QifFit {
    pub theta: DVector<f64>,
    pub objective: f64,
    /// `Q_n` at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// True when the last step length was within tolerance, false when the
    /// line search could not improve the objective any further.
    pub step_converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub cn_update: CnUpdate,
    /// `C_n` handling of the penalized solver.
    pub penalized_cn_update: CnUpdate,
    /// Thresholding level of the penalized solver.
    pub epsilon: f64,
}

impl From<&FitConfig> for SolverOptions {
    fn from(c: &FitConfig) -> Self {
        Self {
            tol: c.tol,
            max_iter: c.max_iter,
            cn_update: c.cn_update,
            penalized_cn_update: c.penalized_cn_update,
            epsilon: c.epsilon,
        }
    }
}

impl Default for SolverOptions {
    fn default() -> Self {
        (&FitConfig::default()).into()
    }
}

impl QifModel {
    /// Builds the spline system from `ds` itself.
    pub fn new(ds: &ClusterDataset, degree: usize, family: Family, structure: WorkingStructure, ridge: f64) -> Result<Self> {
        let spline = SplineSystem::build(ds, degree)?;
        Self::with_spline(ds, spline, family, structure, ridge)
    }

    pub fn from_config(ds: &ClusterDataset, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        Self::new(ds, cfg.degree, cfg.family, cfg.structure, cfg.ridge)
    }

    pub fn with_spline(
        ds: &ClusterDataset,
        spline: SplineSystem,
        family: Family,
        structure: WorkingStructure,
        ridge: f64,
    ) -> Result<Self> {
        crate::types::validate_dataset(ds).into_result()?;
        if spline.d_x() != ds.d_x {
            return Err(GaplmError::Dimension(format!(
                "spline system has {} covariates, dataset has {}",
                spline.d_x(),
                ds.d_x
            )));
        }
        let layout = ThetaLayout::new(ds.d_z, ds.d_x, spline.j_n());
        let mut designs = Vec::with_capacity(ds.n_clusters());
        for c in &ds.clusters {
            let b = spline.cluster_design(&c.x)?;
            let mut d = DMatrix::zeros(c.size(), layout.len());
            d.columns_mut(0, ds.d_z).copy_from(&c.z);
            d.columns_mut(ds.d_z, b.ncols()).copy_from(&b);
            designs.push(d);
        }
        let ys = ds.clusters.iter().map(|c| c.y.clone()).collect();
        let mut m = Self::from_designs(designs, ys, layout, family, structure, ridge)?;
        m.spline = Some(spline);
        Ok(m)
    }

    /// Model over the listed parameter coordinates only; `layout` must
    /// describe them. No spline system is attached.
    pub fn restrict(&self, coords: &[usize], layout: ThetaLayout) -> Result<Self> {
        if coords.len() != layout.len() || coords.iter().any(|&c| c >= self.dim()) {
            return Err(GaplmError::Dimension(format!("{} coordinates for a layout of length {}", coords.len(), layout.len())));
        }
        let designs = self.designs.iter().map(|d| d.select_columns(coords)).collect();
        Self::from_designs(designs, self.ys.clone(), layout, self.family, self.structure(), self.ridge)
    }

    /// Model over explicit designs; no spline system is attached.
    pub fn from_designs(
        designs: Vec<DMatrix<f64>>,
        ys: Vec<DVector<f64>>,
        layout: ThetaLayout,
        family: Family,
        structure: WorkingStructure,
        ridge: f64,
    ) -> Result<Self> {
        if designs.is_empty() || designs.len() != ys.len() {
            return Err(GaplmError::Dimension("need one design per response vector, at least one cluster".into()));
        }
        for (d, y) in designs.iter().zip(&ys) {
            if d.nrows() != y.len() || d.ncols() != layout.len() || y.is_empty() {
                return Err(GaplmError::Dimension(format!(
                    "design {}x{} does not match response length {} and parameter length {}",
                    d.nrows(),
                    d.ncols(),
                    y.len(),
                    layout.len()
                )));
            }
        }
        if !(ridge >= 0.0) {
            return Err(GaplmError::Config(format!("ridge must be non-negative, got {ridge}")));
        }
        let basis = BasisCache::new(structure, ys.iter().map(|y| y.len()))?;
        Ok(Self { family, layout, ridge, designs, ys, basis, k: structure.n_basis(), spline: None })
    }

    pub fn n_clusters(&self) -> usize {
        self.designs.len()
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    /// Length of the extended score, `K d_n`.
    pub fn score_dim(&self) -> usize {
        self.k * self.dim()
    }

    pub fn structure(&self) -> WorkingStructure {
        self.basis.structure()
    }

    pub fn spline(&self) -> Option<&SplineSystem> {
        self.spline.as_ref()
    }

    pub fn designs(&self) -> &[DMatrix<f64>] {
        &self.designs
    }

    pub fn responses(&self) -> &[DVector<f64>] {
        &self.ys
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(GaplmError::Dimension(format!(
                "theta has length {}, model expects {}",
                theta.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Linear predictor, mean and related per-observation quantities.
    fn cluster_state(&self, theta: &DVector<f64>, i: usize) -> Result<ClusterState> {
        let d = &self.designs[i];
        let y = &self.ys[i];
        let eta = d * theta;
        let t = eta.len();
        let mut s = ClusterState {
            eta: eta.clone(),
            mu: DVector::zeros(t),
            w: DVector::zeros(t),
            u: DVector::zeros(t),
        };
        for r in 0..t {
            Family::check_eta(eta[r])?;
            let mu = self.family.mu(eta[r]);
            if !mu.is_finite() || self.family.saturated(mu) {
                return Err(GaplmError::Numeric(format!("mean {mu} in cluster {i}")));
            }
            let sv = self.family.variance(mu).sqrt();
            s.mu[r] = mu;
            s.w[r] = self.family.mu_dot(eta[r]) / sv;
            s.u[r] = (y[r] - mu) / sv;
        }
        Ok(s)
    }

    /// `g_i(theta)`: the blocks `D_i^T Delta_i A_i^{-1/2} M_k A_i^{-1/2} (Y_i - mu_i)`.
    pub fn extended_score(&self, theta: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let mut out = DVector::zeros(self.score_dim());
        self.cluster_contribution(theta, i, &mut out, None)?;
        Ok(out)
    }

    fn cluster_contribution(
        &self,
        theta: &DVector<f64>,
        i: usize,
        score: &mut DVector<f64>,
        jac: Option<&mut DMatrix<f64>>,
    ) -> Result<()> {
        let st = self.cluster_state(theta, i)?;
        let d = &self.designs[i];
        let y = &self.ys[i];
        let t = y.len();
        let p = self.dim();
        let ms = self.basis.get(t).expect("basis cache covers all cluster sizes");
        let mus: Vec<DVector<f64>> = ms.iter().map(|m| m * &st.u).collect();
        for (k, mu_k) in mus.iter().enumerate() {
            let v = st.w.component_mul(mu_k);
            score.rows_mut(k * p, p).copy_from(&(d.transpose() * v));
        }
        if let Some(jac) = jac {
            let f = self.family;
            let mut up = DVector::zeros(t);
            let mut wp = DVector::zeros(t);
            for r in 0..t {
                let mu = st.mu[r];
                let v = f.variance(mu);
                let sv = v.sqrt();
                let md = f.mu_dot(st.eta[r]);
                let vd = f.variance_dot(mu);
                up[r] = -md / sv - 0.5 * (y[r] - mu) * vd * md / (v * sv);
                wp[r] = f.mu_ddot(st.eta[r]) / sv - 0.5 * md * md * vd / (v * sv);
            }
            for (k, m) in ms.iter().enumerate() {
                let mut a = DMatrix::zeros(t, t);
                for r in 0..t {
                    for c in 0..t {
                        a[(r, c)] = st.w[r] * m[(r, c)] * up[c];
                    }
                    a[(r, r)] += wp[r] * mus[k][r];
                }
                let block = d.transpose() * a * d;
                jac.view_mut((k * p, 0), (p, p)).copy_from(&block);
            }
        }
        Ok(())
    }

    /// Scores, `G_n`, `C_n` and optionally `dG_n/dtheta`.
    pub fn evaluate(&self, theta: &DVector<f64>, jacobian: bool) -> Result<QifEval> {
        self.check_theta(theta)?;
        let n = self.n_clusters();
        let kd = self.score_dim();
        let p = self.dim();
        let mut scores = DMatrix::zeros(n, kd);
        let mut gdot = jacobian.then(|| DMatrix::zeros(kd, p));
        let mut buf = DVector::zeros(kd);
        let mut jbuf = DMatrix::zeros(kd, p);
        for i in 0..n {
            buf.fill(0.0);
            if jacobian {
                jbuf.fill(0.0);
                self.cluster_contribution(theta, i, &mut buf, Some(&mut jbuf))?;
                if let Some(gd) = gdot.as_mut() {
                    *gd += &jbuf;
                }
            } else {
                self.cluster_contribution(theta, i, &mut buf, None)?;
            }
            scores.set_row(i, &buf.transpose());
        }
        let nf = n as f64;
        let g = scores.row_sum().transpose() / nf;
        let mut c = scores.transpose() * &scores / nf;
        linalg::symmetrize(&mut c);
        if let Some(gd) = gdot.as_mut() {
            *gd /= nf;
        }
        Ok(QifEval { g, c, scores, gdot })
    }

    /// `(G_n, C_n)`.
    pub fn moments(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let e = self.evaluate(theta, false)?;
        Ok((e.g, e.c))
    }

    pub fn cn_solver(&self, c: &DMatrix<f64>) -> Result<CnSolver> {
        CnSolver::new(c, self.ridge)
    }

    /// `Q_n(theta) = n G_n^T (C_n + delta I)^{-1} G_n`.
    pub fn objective(&self, theta: &DVector<f64>) -> Result<f64> {
        let e = self.evaluate(theta, false)?;
        let w = self.cn_solver(&e.c)?;
        Ok(self.n_clusters() as f64 * w.quad(&e.g)?)
    }

    /// `Q_n` with `C_n` replaced by a fixed weight.
    pub fn objective_with(&self, theta: &DVector<f64>, w: &CnSolver) -> Result<f64> {
        let (g, _) = self.moments(theta)?;
        Ok(self.n_clusters() as f64 * w.quad(&g)?)
    }

    /// Objective, `2n Gdot^T W G_n` and `2n Gdot^T W Gdot`, with `W` from
    /// `frozen` if given and from `C_n(theta)` otherwise.
    pub fn local_quadratic(&self, theta: &DVector<f64>, frozen: Option<&CnSolver>) -> Result<LocalQuadratic> {
        let e = self.evaluate(theta, true)?;
        let own;
        let w = match frozen {
            Some(w) => w,
            None => {
                own = self.cn_solver(&e.c)?;
                &own
            }
        };
        let gdot = e.gdot.expect("jacobian requested");
        let n = self.n_clusters() as f64;
        let wg = w.solve(&e.g)?;
        let wgd = w.solve_matrix(&gdot);
        let q = n * e.g.dot(&wg).max(0.0);
        let grad = gdot.transpose() * wg * (2.0 * n);
        let mut hess = gdot.transpose() * wgd * (2.0 * n);
        linalg::symmetrize(&mut hess);
        Ok(LocalQuadratic { q, grad, hess })
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.local_quadratic(theta, None)?.grad)
    }

    pub fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.local_quadratic(theta, None)?.hess)
    }

    /// Fitted means `mu_i(theta)` per cluster.
    pub fn fitted_means(&self, theta: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check_theta(theta)?;
        self.designs
            .iter()
            .map(|d| {
                let eta = d * theta;
                for &e in eta.iter() {
                    Family::check_eta(e)?;
                }
                Ok(eta.map(|e| self.family.mu(e)))
            })
            .collect()
    }

    /// Least squares for the identity link, a few working-independence IRLS
    /// sweeps for the logit.
    pub fn initial_estimate(&self) -> Result<DVector<f64>> {
        let n_obs: usize = self.ys.iter().map(|y| y.len()).sum();
        let mut x = DMatrix::zeros(n_obs, self.dim());
        let mut y = DVector::zeros(n_obs);
        let mut r = 0;
        for (d, yi) in self.designs.iter().zip(&self.ys) {
            x.rows_mut(r, d.nrows()).copy_from(d);
            y.rows_mut(r, d.nrows()).copy_from(yi);
            r += d.nrows();
        }
        match self.family {
            Family::GaussianIdentity => linalg::least_squares(&x, &y),
            Family::BinomialLogit => {
                let f = self.family;
                let mut beta = DVector::zeros(self.dim());
                for _ in 0..5 {
                    let eta = &x * &beta;
                    let mut xw = x.clone();
                    let mut zw = DVector::zeros(n_obs);
                    for i in 0..n_obs {
                        let mu = f.mu(eta[i]);
                        let md = f.mu_dot(eta[i]).max(1e-10);
                        let wt = md.sqrt();
                        xw.row_mut(i).scale_mut(wt);
                        zw[i] = wt * (eta[i] + (y[i] - mu) / md);
                    }
                    beta = linalg::least_squares(&xw, &zw)?;
                }
                Ok(beta)
            }
        }
    }

    /// Unpenalized QIF estimate by damped Gauss-Newton.
    pub fn fit_unpenalized(&self, theta0: Option<&DVector<f64>>, opts: &SolverOptions) -> Result<QifFit> {
        let mut theta = match theta0 {
            Some(t) => {
                self.check_theta(t)?;
                t.clone()
            }
            None => self.initial_estimate()?,
        };
        let frozen = match opts.cn_update {
            CnUpdate::Frozen => Some(self.cn_solver(&self.evaluate(&theta, false)?.c)?),
            CnUpdate::Varying => None,
        };
        let mut lq = self.local_quadratic(&theta, frozen.as_ref())?;
        let mut trace = vec![lq.q];
        for iter in 1..=opts.max_iter {
            let step = solve_spd(&lq.hess, &lq.grad, "Gauss-Newton matrix")?;
            let mut s = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand = &theta - &step * s;
                let q = match &frozen {
                    Some(w) => self.objective_with(&cand, w),
                    None => self.objective(&cand),
                };
                if let Ok(q) = q {
                    if q.is_finite() && q <= lq.q {
                        accepted = Some(cand);
                        break;
                    }
                }
                s *= 0.5;
            }
            let Some(cand) = accepted else {
                return Ok(QifFit { objective: lq.q, theta, trace, iterations: iter, step_converged: false });
            };
            let moved = (&cand - &theta).norm();
            theta = cand;
            lq = self.local_quadratic(&theta, frozen.as_ref())?;
            trace.push(lq.q);
            if moved <= opts.tol {
                return Ok(QifFit { objective: lq.q, theta, trace, iterations: iter, step_converged: true });
            }
        }
        Err(GaplmError::Convergence { iterations: opts.max_iter, trace })
    }

    /// `alpha_l` on a grid, shifted to have zero mean over the training
    /// observations.
    pub fn extract_alpha(&self, theta: &DVector<f64>, l: usize, grid: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let spline = self
            .spline
            .as_ref()
            .ok_or_else(|| GaplmError::Capability("model was built without a spline system".into()))?;
        if l >= self.layout.d_x {
            return Err(GaplmError::Dimension(format!("covariate {l} >= d_x={}", self.layout.d_x)));
        }
        let range = self.layout.group_range(l);
        let gamma = theta.rows(range.start, range.len()).into_owned();
        let mut sum = 0.0;
        let mut count = 0usize;
        for d in &self.designs {
            let block = d.columns(range.start, range.len());
            sum += (block * &gamma).sum();
            count += d.nrows();
        }
        let mean = sum / count as f64;
        grid.iter().map(|&x| Ok(spline.eval_function(l, &gamma, x)? - mean)).collect()
    }

    /// Sandwich covariance of `beta_hat` (diagnostic).
    ///
    /// Z is first projected off the spline columns by least squares over all
    /// observations; the middle matrix uses the extended scores at
    /// `theta_hat` in place of the unknown error covariance.
    pub fn beta_covariance(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        let d_z = self.layout.d_z;
        let p = self.dim();
        let n = self.n_clusters();
        let n_obs: usize = self.ys.iter().map(|y| y.len()).sum();
        let mut z_all = DMatrix::zeros(n_obs, d_z);
        let mut b_all = DMatrix::zeros(n_obs, p - d_z);
        let mut r = 0;
        for d in &self.designs {
            z_all.rows_mut(r, d.nrows()).copy_from(&d.columns(0, d_z));
            b_all.rows_mut(r, d.nrows()).copy_from(&d.columns(d_z, p - d_z));
            r += d.nrows();
        }
        let z_tilde = if p > d_z {
            let btb = b_all.transpose() * &b_all;
            let btz = b_all.transpose() * &z_all;
            let chol = cholesky_with_fallback(&btb, 0.0)
                .ok_or_else(|| GaplmError::Singular("spline design is rank deficient".into()))?;
            &z_all - &b_all * chol.solve(&btz)
        } else {
            z_all
        };

        let e = self.evaluate(theta, false)?;
        let mut jhat = DMatrix::zeros(self.score_dim(), d_z);
        let mut r = 0;
        for i in 0..n {
            let st = self.cluster_state(theta, i)?;
            let d = &self.designs[i];
            let t = d.nrows();
            let zt = z_tilde.rows(r, t);
            r += t;
            let ms = self.basis.get(t).expect("basis cache covers all cluster sizes");
            for (k, m) in ms.iter().enumerate() {
                let gamma = DMatrix::from_fn(t, t, |a, b| st.w[a] * m[(a, b)] * st.w[b]);
                let block = d.transpose() * gamma * zt;
                let mut view = jhat.view_mut((k * p, 0), (p, d_z));
                view += block;
            }
        }
        jhat /= n as f64;

        let w = self.cn_solver(&e.c)?;
        let wj = w.solve_matrix(&jhat);
        let mut psi = jhat.transpose() * &wj;
        linalg::symmetrize(&mut psi);
        let psi_chol = Cholesky::new(psi.clone())
            .ok_or_else(|| GaplmError::Singular("Psi is not positive definite".into()))?;
        // rows of scores * W J are (J^T W g_i)^T
        let proj = &e.scores * &wj;
        let omega = proj.transpose() * &proj / n as f64;
        let psi_inv = psi_chol.inverse();
        let mut sigma = &psi_inv * omega * &psi_inv / n as f64;
        linalg::symmetrize(&mut sigma);
        Ok(sigma)
    }

    /// Unpacks `theta` with this model's layout.
    pub fn unpack(&self, theta: &DVector<f64>) -> Result<Theta> {
        Theta::unpack(theta, self.layout.d_z, self.layout.d_x, self.layout.j_n)
    }
}

struct ClusterState {
    eta: DVector<f64>,
    mu: DVector<f64>,
    w: DVector<f64>,
    u: DVector<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{least_squares, min_eigenvalue};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(
        rng: &mut ChaCha8Rng,
        n: usize,
        p: usize,
        family: Family,
        structure: WorkingStructure,
    ) -> (QifModel, DVector<f64>) {
        let truth = DVector::from_fn(p, |_, _| rng.random_range(-0.5..0.5));
        let mut designs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let t = rng.random_range(1..=4);
            let d = DMatrix::from_fn(t, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
            let eta = &d * &truth;
            let y = eta.map(|e| match family {
                Family::GaussianIdentity => e + rng.random_range(-1.0..1.0),
                Family::BinomialLogit => {
                    if rng.random::<f64>() < family.mu(e) {
                        1.0
                    } else {
                        0.0
                    }
                }
            });
            designs.push(d);
            ys.push(y);
        }
        let layout = ThetaLayout::new(p, 0, 0);
        (QifModel::from_designs(designs, ys, layout, family, structure, 1e-8).unwrap(), truth)
    }

    #[test]
    fn zero_residual_gives_zero_score() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 1.0, -0.2]);
        let theta = DVector::from_vec(vec![0.4, 1.0]);
        for f in [Family::GaussianIdentity, Family::BinomialLogit] {
            let y = (&d * &theta).map(|e| f.mu(e));
            let m = QifModel::from_designs(vec![d.clone()], vec![y], ThetaLayout::new(2, 0, 0), f, WorkingStructure::Exchangeable, 1e-8)
                .unwrap();
            assert_eq!(m.extended_score(&theta, 0).unwrap().amax(), 0.0);
            assert_eq!(m.objective(&theta).unwrap(), 0.0);
            assert_eq!(m.gradient(&theta).unwrap().amax(), 0.0);
        }
    }

    #[test]
    fn scalar_identity_score() {
        let d = DMatrix::from_element(1, 1, 2.5);
        let y = DVector::from_element(1, 1.0);
        let m = QifModel::from_designs(vec![d], vec![y], ThetaLayout::new(1, 0, 0), Family::GaussianIdentity, WorkingStructure::Independence, 1e-8)
            .unwrap();
        let theta = DVector::from_element(1, 0.2);
        // residual 1 - 0.5 = 0.5
        assert!((m.extended_score(&theta, 0).unwrap()[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn ec_score_stacks_independence_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (ind, _) = random_model(&mut rng, 5, 3, Family::BinomialLogit, WorkingStructure::Independence);
        let ec = QifModel::from_designs(
            ind.designs.clone(),
            ind.ys.clone(),
            ind.layout,
            ind.family,
            WorkingStructure::Exchangeable,
            1e-8,
        )
        .unwrap();
        let theta = DVector::from_vec(vec![0.1, -0.3, 0.2]);
        for i in 0..5 {
            let a = ind.extended_score(&theta, i).unwrap();
            let b = ec.extended_score(&theta, i).unwrap();
            assert_eq!(b.len(), 6);
            assert_eq!(b.rows(0, 3), a);
        }
    }

    fn scalar_model(scores: &[f64]) -> QifModel {
        // T=1, D=[1], y = score, theta = 0: each extended score equals y
        let designs = scores.iter().map(|_| DMatrix::from_element(1, 1, 1.0)).collect();
        let ys = scores.iter().map(|&s| DVector::from_element(1, s)).collect();
        QifModel::from_designs(designs, ys, ThetaLayout::new(1, 0, 0), Family::GaussianIdentity, WorkingStructure::Independence, 0.0)
            .unwrap()
    }

    #[test]
    fn scalar_objective_values() {
        let zero = DVector::zeros(1);
        assert!((scalar_model(&[1.0, 1.0]).objective(&zero).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(scalar_model(&[1.0, -1.0]).objective(&zero).unwrap(), 0.0);
        let (g, c) = scalar_model(&[1.0, 3.0]).moments(&zero).unwrap();
        assert_eq!(g[0], 2.0);
        assert_eq!(c[(0, 0)], 5.0);
    }

    #[test]
    fn zero_c_with_nonzero_g_is_singular() {
        let c = DMatrix::zeros(2, 2);
        let w = CnSolver::new(&c, 1e-8).unwrap();
        assert!(matches!(w.quad(&DVector::from_vec(vec![1.0, 0.0])), Err(GaplmError::Singular(_))));
        assert_eq!(w.quad(&DVector::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn c_n_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in WorkingStructure::ALL {
            let (m, truth) = random_model(&mut rng, 30, 4, Family::BinomialLogit, s);
            let (_, c) = m.moments(&truth).unwrap();
            assert!(min_eigenvalue(&c) >= -1e-10);
        }
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for f in [Family::GaussianIdentity, Family::BinomialLogit] {
            for s in WorkingStructure::ALL {
                let (m, truth) = random_model(&mut rng, 40, 3, f, s);
                let theta = &truth + DVector::from_fn(3, |_, _| rng.random_range(-0.3..0.3));
                let e = m.evaluate(&theta, true).unwrap();
                let w = m.cn_solver(&e.c).unwrap();
                let lq = m.local_quadratic(&theta, None).unwrap();
                let h = 1e-5;
                for j in 0..3 {
                    let mut tp = theta.clone();
                    tp[j] += h;
                    let mut tm = theta.clone();
                    tm[j] -= h;
                    let fd = (m.objective_with(&tp, &w).unwrap() - m.objective_with(&tm, &w).unwrap()) / (2.0 * h);
                    let scale = lq.grad.amax().max(1e-8);
                    assert!((fd - lq.grad[j]).abs() <= 1e-5 * scale, "{f} {s}: {fd} vs {}", lq.grad[j]);
                    // Jacobian column j
                    let gp = m.moments(&tp).unwrap().0;
                    let gm = m.moments(&tm).unwrap().0;
                    let col = (gp - gm) / (2.0 * h);
                    let an = e.gdot.as_ref().unwrap().column(j).into_owned();
                    assert!((col - &an).amax() <= 1e-6 * an.amax().max(1e-8));
                }
                assert!(min_eigenvalue(&lq.hess) >= -1e-8 * linalg::trace(&lq.hess).abs());
            }
        }
    }

    #[test]
    fn gaussian_independence_fit_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (m, _) = random_model(&mut rng, 60, 4, Family::GaussianIdentity, WorkingStructure::Independence);
        let fit = m.fit_unpenalized(None, &SolverOptions::default()).unwrap();
        let n_obs: usize = m.ys.iter().map(|y| y.len()).sum();
        let mut x = DMatrix::zeros(n_obs, 4);
        let mut y = DVector::zeros(n_obs);
        let mut r = 0;
        for (d, yi) in m.designs.iter().zip(&m.ys) {
            x.rows_mut(r, d.nrows()).copy_from(d);
            y.rows_mut(r, d.nrows()).copy_from(yi);
            r += d.nrows();
        }
        let ols = least_squares(&x, &y).unwrap();
        assert!((fit.theta - ols).amax() <= 1e-8);
    }

    #[test]
    fn noiseless_data_recovers_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, truth) = random_model(&mut rng, 50, 3, Family::GaussianIdentity, WorkingStructure::Exchangeable);
        let ys = m.designs.iter().map(|d| d * &truth).collect();
        let m = QifModel::from_designs(m.designs.clone(), ys, m.layout, m.family, WorkingStructure::Exchangeable, 1e-8)
            .unwrap();
        let start = DVector::zeros(3);
        let fit = m.fit_unpenalized(Some(&start), &SolverOptions::default()).unwrap();
        assert!((fit.theta - truth).amax() <= 1e-6);
    }

    #[test]
    fn binomial_trace_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for s in WorkingStructure::ALL {
            let (m, _) = random_model(&mut rng, 150, 3, Family::BinomialLogit, s);
            let fit = m.fit_unpenalized(None, &SolverOptions::default()).unwrap();
            assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
            let frozen = SolverOptions { cn_update: CnUpdate::Frozen, ..SolverOptions::default() };
            let ff = m.fit_unpenalized(None, &frozen).unwrap();
            assert!(ff.trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn objective_invariant_to_cluster_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (m, truth) = random_model(&mut rng, 25, 3, Family::BinomialLogit, WorkingStructure::Ar1);
        let mut idx: Vec<usize> = (0..25).collect();
        idx.reverse();
        idx.swap(3, 17);
        let m2 = QifModel::from_designs(
            idx.iter().map(|&i| m.designs[i].clone()).collect(),
            idx.iter().map(|&i| m.ys[i].clone()).collect(),
            m.layout,
            m.family,
            WorkingStructure::Ar1,
            1e-8,
        )
        .unwrap();
        let a = m.objective(&truth).unwrap();
        let b = m2.objective(&truth).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn pseudo_inverse_objective_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (m, truth) = random_model(&mut rng, 8, 4, Family::GaussianIdentity, WorkingStructure::Exchangeable);
        let m = QifModel { ridge: 0.0, ..m };
        for _ in 0..20 {
            let th = &truth + DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            assert!(m.objective(&th).unwrap() >= 0.0);
        }
    }

    #[test]
    fn bad_theta_length_is_dimension_error() {
        let m = scalar_model(&[1.0]);
        assert!(matches!(m.objective(&DVector::zeros(2)), Err(GaplmError::Dimension(_))));
    }
}
