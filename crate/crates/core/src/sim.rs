//! Simulation designs, correlated data generators and replication studies.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::correlation::{ar1_matrix, exchangeable_matrix, WorkingStructure};
use crate::error::{GaplmError, Result};
use crate::family::Family;
use crate::metrics::{model_error, FittedMean, MeanPredictor, ReplicationRecord, StudySummary};
use crate::penalty::{classify_selection, Selection};
use crate::qif::{QifModel, SolverOptions};
use crate::tuning::{select_lambda, TuningConfig};
use crate::types::{Cluster, ClusterDataset, FitConfig, PenaltyKind};

/// Size of the independent test sample used for model errors.
pub const TEST_CLUSTERS: usize = 1000;

/// Additive component shapes used by the designs. All integrate to zero on
/// `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaFn {
    Zero,
    /// `sin(2 pi x)`
    Sin2Pi,
    /// `8x(1-x) - 4/3`
    Quadratic,
    /// `cos(2 pi x) / 4`
    CosQuarter,
}

impl AlphaFn {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            AlphaFn::Zero => 0.0,
            AlphaFn::Sin2Pi => (2.0 * PI * x).sin(),
            AlphaFn::Quadratic => 8.0 * x * (1.0 - x) - 4.0 / 3.0,
            AlphaFn::CosQuarter => (2.0 * PI * x).cos() / 4.0,
        }
    }
}

/// Data-generating mean model.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub family: Family,
    pub alphas: Vec<AlphaFn>,
    pub beta: DVector<f64>,
}

impl Truth {
    pub fn selection(&self) -> Selection {
        Selection::new(
            (0..self.beta.len()).filter(|&j| self.beta[j] != 0.0),
            (0..self.alphas.len()).filter(|&l| self.alphas[l] != AlphaFn::Zero),
        )
    }

    pub fn nonzero_x(&self) -> Vec<usize> {
        self.selection().groups.into_iter().collect()
    }

    pub fn nonzero_z(&self) -> Vec<usize> {
        self.selection().linear.into_iter().collect()
    }
}

impl MeanPredictor for Truth {
    fn family(&self) -> Family {
        self.family
    }

    fn eta(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        if x.len() < self.alphas.len() || z.len() < self.beta.len() {
            return Err(GaplmError::Dimension("covariate row shorter than the true model".into()));
        }
        let a: f64 = self.alphas.iter().zip(x).map(|(f, &v)| f.eval(v)).sum();
        let b: f64 = self.beta.iter().zip(z).map(|(b, v)| b * v).sum();
        Ok(a + b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignId {
    Example1,
    Example2,
    Example3,
}

impl fmt::Display for DesignId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesignId::Example1 => "example1",
            DesignId::Example2 => "example2",
            DesignId::Example3 => "example3",
        })
    }
}

impl std::str::FromStr for DesignId {
    type Err = GaplmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "example1" | "ex1" | "1" => Ok(DesignId::Example1),
            "example2" | "ex2" | "2" => Ok(DesignId::Example2),
            "example3" | "ex3" | "3" => Ok(DesignId::Example3),
            other => Err(GaplmError::Config(format!("unknown design {other:?}"))),
        }
    }
}

/// Within-cluster dependence of the responses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorSpec {
    /// Gaussian errors with exchangeable correlation.
    Exchangeable { rho: f64, sigma2: f64 },
    /// Gaussian errors with a fresh random correlation matrix per dataset.
    RandomCorrelation { sigma2: f64 },
    /// Binary responses with the given average pairwise correlation.
    Binary { rho: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimDesign {
    pub id: DesignId,
    pub n: usize,
    pub t: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub truth: Truth,
    pub errors: ErrorSpec,
    /// AR-1 correlation among the non-intercept linear covariates.
    pub z_rho: f64,
}

fn pad_alphas(head: &[AlphaFn], d_x: usize) -> Vec<AlphaFn> {
    (0..d_x).map(|l| head.get(l).copied().unwrap_or(AlphaFn::Zero)).collect()
}

fn pad_beta(head: &[f64], d_z: usize) -> DVector<f64> {
    DVector::from_fn(d_z, |j, _| head.get(j).copied().unwrap_or(0.0))
}

impl SimDesign {
    /// Gaussian design with `d_x = d_z = 2 round(n^{1/4})` and `T = 5`, which
    /// gives 6, 8 and 10 at n = 100, 200 and 500.
    pub fn example1(n: usize) -> Result<Self> {
        if n < 20 {
            return Err(GaplmError::Config(format!("example1 needs n >= 20, got {n}")));
        }
        let d = 2 * (n as f64).powf(0.25).round() as usize;
        Ok(Self {
            id: DesignId::Example1,
            n,
            t: 5,
            d_x: d,
            d_z: d,
            truth: Truth {
                family: Family::GaussianIdentity,
                alphas: pad_alphas(&[AlphaFn::Sin2Pi, AlphaFn::Quadratic], d),
                beta: pad_beta(&[1.0, 2.0], d),
            },
            errors: ErrorSpec::Exchangeable { rho: 0.7, sigma2: 1.5 },
            z_rho: 0.7,
        })
    }

    /// Example 1's mean model with `d_x = 9`, `d_z = 5`, `T = 3` and a random
    /// error correlation per dataset.
    pub fn example2(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(GaplmError::Config(format!("example2 needs n >= 2, got {n}")));
        }
        Ok(Self {
            id: DesignId::Example2,
            n,
            t: 3,
            d_x: 9,
            d_z: 5,
            truth: Truth {
                family: Family::GaussianIdentity,
                alphas: pad_alphas(&[AlphaFn::Sin2Pi, AlphaFn::Quadratic], 9),
                beta: pad_beta(&[1.0, 2.0], 5),
            },
            errors: ErrorSpec::RandomCorrelation { sigma2: 1.5 },
            z_rho: 0.7,
        })
    }

    /// Binary design with `n = 250`, `T = 20`.
    pub fn example3() -> Self {
        Self::example3_sized(250, 20).expect("valid default size")
    }

    /// Example 3 with another number or size of clusters.
    pub fn example3_sized(n: usize, t: usize) -> Result<Self> {
        if n < 2 || t < 1 {
            return Err(GaplmError::Config(format!("example3 needs n >= 2 and T >= 1, got n={n}, T={t}")));
        }
        Ok(Self {
            id: DesignId::Example3,
            n,
            t,
            d_x: 5,
            d_z: 10,
            truth: Truth {
                family: Family::BinomialLogit,
                alphas: pad_alphas(&[AlphaFn::CosQuarter], 5),
                beta: pad_beta(&[1.0], 10),
            },
            errors: ErrorSpec::Binary { rho: 0.3 },
            z_rho: 0.7,
        })
    }

    /// Default design for an id; `n` and `t` override the defaults where the
    /// design allows it.
    pub fn build(id: DesignId, n: Option<usize>, t: Option<usize>) -> Result<Self> {
        let mut d = match id {
            DesignId::Example1 => Self::example1(n.unwrap_or(200))?,
            DesignId::Example2 => Self::example2(n.unwrap_or(250))?,
            DesignId::Example3 => Self::example3_sized(n.unwrap_or(250), t.unwrap_or(20))?,
        };
        if let Some(t) = t {
            if t < 1 {
                return Err(GaplmError::Config("cluster size must be positive".into()));
            }
            d.t = t;
        }
        Ok(d)
    }

    pub fn label(&self) -> String {
        format!("{} n={} T={}", self.id, self.n, self.t)
    }

    /// Training sample. The random correlation of [`ErrorSpec::RandomCorrelation`]
    /// is drawn first from the same stream.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ClusterDataset> {
        let cov = CovariateSampler::new(self)?;
        let clusters = match self.errors {
            ErrorSpec::Exchangeable { rho, sigma2 } => {
                let l = chol_lower(&(exchangeable_matrix(rho, self.t) * sigma2))?;
                self.gaussian_clusters(&cov, &l, rng)?
            }
            ErrorSpec::RandomCorrelation { sigma2 } => {
                let gamma = random_correlation(self.t, rng)?;
                let l = chol_lower(&(gamma * sigma2))?;
                self.gaussian_clusters(&cov, &l, rng)?
            }
            ErrorSpec::Binary { rho } => {
                let mut out = Vec::with_capacity(self.n);
                for _ in 0..self.n {
                    let (x, z) = cov.sample(self.t, rng);
                    let p = self.cluster_means(&x, &z)?;
                    let dg = DichotomizedGaussian::calibrate(p.as_slice(), rho)?;
                    let y = DVector::from_vec(dg.sample(rng));
                    out.push(Cluster::new(y, x, z));
                }
                out
            }
        };
        Ok(ClusterDataset::new(clusters, self.d_x, self.d_z))
    }

    /// Covariates of `n_star` fresh clusters with `y` set to the true mean.
    pub fn test_set<R: Rng + ?Sized>(&self, n_star: usize, rng: &mut R) -> Result<ClusterDataset> {
        let cov = CovariateSampler::new(self)?;
        let mut clusters = Vec::with_capacity(n_star);
        for _ in 0..n_star {
            let (x, z) = cov.sample(self.t, rng);
            let y = self.cluster_means(&x, &z)?;
            clusters.push(Cluster::new(y, x, z));
        }
        Ok(ClusterDataset::new(clusters, self.d_x, self.d_z))
    }

    fn cluster_means(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(x.nrows());
        for t in 0..x.nrows() {
            let xr: Vec<f64> = x.row(t).iter().copied().collect();
            let zr: Vec<f64> = z.row(t).iter().copied().collect();
            out[t] = self.truth.mean(&xr, &zr)?;
        }
        Ok(out)
    }

    fn gaussian_clusters<R: Rng + ?Sized>(&self, cov: &CovariateSampler, l: &DMatrix<f64>, rng: &mut R) -> Result<Vec<Cluster>> {
        let mut out = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let (x, z) = cov.sample(self.t, rng);
            let mean = self.cluster_means(&x, &z)?;
            let e = l * standard_normal_vector(self.t, rng);
            out.push(Cluster::new(mean + e, x, z));
        }
        Ok(out)
    }
}

struct CovariateSampler {
    d_x: usize,
    d_z: usize,
    z_chol: Option<DMatrix<f64>>,
}

impl CovariateSampler {
    fn new(d: &SimDesign) -> Result<Self> {
        let z_chol = if d.d_z > 1 { Some(chol_lower(&ar1_matrix(d.z_rho, d.d_z - 1))?) } else { None };
        Ok(Self { d_x: d.d_x, d_z: d.d_z, z_chol })
    }

    /// `X^{(l)} = (2 W^{(l)} + U) / 3` with one `U` per observation, and `Z` =
    /// intercept plus an AR-1 Gaussian vector.
    fn sample<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut x = DMatrix::zeros(t, self.d_x);
        let mut z = DMatrix::zeros(t, self.d_z);
        for s in 0..t {
            let u: f64 = rng.random();
            for l in 0..self.d_x {
                let w: f64 = rng.random();
                x[(s, l)] = (2.0 * w + u) / 3.0;
            }
            if self.d_z > 0 {
                z[(s, 0)] = 1.0;
            }
            if let Some(lz) = &self.z_chol {
                let v = lz * standard_normal_vector(self.d_z - 1, rng);
                for j in 1..self.d_z {
                    z[(s, j)] = v[j - 1];
                }
            }
        }
        (x, z)
    }
}

fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn chol_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| GaplmError::Generation("covariance is not positive definite".into()))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal<R: Rng + ?Sized>(t: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(t, t, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..t {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `Delta (Sigma_1 + Q Lambda Q^T) Delta`, where `Sigma_1` has unit diagonal
/// and 0.5 elsewhere, `Lambda` is uniform on `[0.2, 2]`, and `Delta` rescales
/// to unit diagonal.
pub fn random_correlation<R: Rng + ?Sized>(t: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if t < 1 {
        return Err(GaplmError::Generation("correlation dimension must be positive".into()));
    }
    let q = random_orthogonal(t, rng);
    let lambda = DVector::from_fn(t, |_, _| rng.random_range(0.2..=2.0));
    let sigma = exchangeable_matrix(0.5, t) + &q * DMatrix::from_diagonal(&lambda) * q.transpose();
    let scale = DVector::from_fn(t, |i, _| sigma[(i, i)].sqrt().recip());
    let mut g = DMatrix::from_fn(t, t, |i, j| scale[i] * sigma[(i, j)] * scale[j]);
    for i in 0..t {
        g[(i, i)] = 1.0;
        for j in 0..i {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Seeded wrapper around [`random_correlation`].
pub fn gen_random_correlation(t: usize, seed: u64) -> Result<DMatrix<f64>> {
    random_correlation(t, &mut ChaCha20Rng::seed_from_u64(seed))
}

/// Example 1 training data.
pub fn gen_example1(n: usize, seed: u64) -> Result<(ClusterDataset, Truth)> {
    let d = SimDesign::example1(n)?;
    Ok((d.generate(&mut ChaCha20Rng::seed_from_u64(seed))?, d.truth))
}

/// Example 2 training data.
pub fn gen_example2(n: usize, seed: u64) -> Result<(ClusterDataset, Truth)> {
    let d = SimDesign::example2(n)?;
    Ok((d.generate(&mut ChaCha20Rng::seed_from_u64(seed))?, d.truth))
}

/// Example 3 training data.
pub fn gen_example3(seed: u64) -> Result<(ClusterDataset, Truth)> {
    let d = SimDesign::example3();
    Ok((d.generate(&mut ChaCha20Rng::seed_from_u64(seed))?, d.truth))
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

const GL6: ([f64; 3], [f64; 3]) = (
    [0.1713244923791705, 0.3607615730481384, 0.4679139345726904],
    [0.9324695142031522, 0.6612093864662647, 0.2386191860831970],
);
const GL12: ([f64; 6], [f64; 6]) = (
    [0.04717533638651177, 0.1069393259953183, 0.1600783285433464, 0.2031674267230659, 0.2334925365383547, 0.2491470458134029],
    [0.9815606342467191, 0.9041172563704750, 0.7699026741943050, 0.5873179542866171, 0.3678314989981802, 0.1252334085114692],
);
const GL20: ([f64; 10], [f64; 10]) = (
    [
        0.01761400713915212,
        0.04060142980038694,
        0.06267204833410906,
        0.08327674157670475,
        0.1019301198172404,
        0.1181945319615184,
        0.1316886384491766,
        0.1420961093183821,
        0.1491729864726037,
        0.1527533871307259,
    ],
    [
        0.9931285991850949,
        0.9639719272779138,
        0.9122344282513259,
        0.8391169718222188,
        0.7463319064601508,
        0.6360536807265150,
        0.5108670019508271,
        0.3737060887154196,
        0.2277858511416451,
        0.07652652113349733,
    ],
);

/// `P(X > h, Y > k)` for a standard bivariate normal with correlation `r`
/// (Genz's algorithm, double precision).
fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { normal_cdf(-k) };
    }
    if k == f64::NEG_INFINITY {
        return normal_cdf(-h);
    }
    if r == 0.0 {
        return normal_cdf(-h) * normal_cdf(-k);
    }
    let (w, x): (&[f64], &[f64]) = if r.abs() < 0.3 {
        (&GL6.0, &GL6.1)
    } else if r.abs() < 0.75 {
        (&GL12.0, &GL12.1)
    } else {
        (&GL20.0, &GL20.1)
    };
    let tp = 2.0 * PI;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin() / 2.0;
        for (&wi, &xi) in w.iter().zip(x) {
            for sx in [1.0 - xi, 1.0 + xi] {
                let sn = (asr * sx).sin();
                bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / tp + normal_cdf(-h) * normal_cdf(-k);
    } else {
        let mut k = k;
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let as_ = 1.0 - r * r;
            let mut a = as_.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 80.0;
            let asr = -(bs / as_ + hk) / 2.0;
            if asr > -100.0 {
                bvn = a * asr.exp() * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_);
            }
            if hk > -100.0 {
                let b = bs.sqrt();
                let sp = tp.sqrt() * normal_cdf(-b / a);
                bvn -= (-hk / 2.0).exp() * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0);
            }
            a /= 2.0;
            let mut sum = 0.0;
            for (&wi, &xi) in w.iter().zip(x) {
                for sx in [1.0 - xi, 1.0 + xi] {
                    let xs = (a * sx) * (a * sx);
                    let asr = -(bs / xs + hk) / 2.0;
                    if asr > -100.0 {
                        let sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs);
                        let rs = (1.0 - xs).sqrt();
                        let ep = (-(hk / 2.0) * xs / ((1.0 + rs) * (1.0 + rs))).exp() / rs;
                        sum += wi * asr.exp() * (sp - ep);
                    }
                }
            }
            bvn = (a * sum - bvn) / tp;
        }
        if r > 0.0 {
            bvn += normal_cdf(-h.max(k));
        } else if h >= k {
            bvn = -bvn;
        } else {
            let l = if h < 0.0 { normal_cdf(k) - normal_cdf(h) } else { normal_cdf(-h) - normal_cdf(-k) };
            bvn = l - bvn;
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// `P(X <= a, Y <= b)` for a standard bivariate normal with correlation `rho`.
pub fn bivariate_normal_cdf(a: f64, b: f64, rho: f64) -> f64 {
    bvn_upper(-a, -b, rho)
}

/// Correlated Bernoulli vector from an exchangeable latent Gaussian:
/// `Y_t = 1{ sqrt(rho) w + sqrt(1-rho) e_t <= Phi^{-1}(p_t) }`.
#[derive(Clone, Debug, PartialEq)]
pub struct DichotomizedGaussian {
    pub p: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub latent_rho: f64,
}

const MAX_LATENT_RHO: f64 = 1.0 - 1e-9;

impl DichotomizedGaussian {
    pub fn with_latent(p: &[f64], latent_rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&latent_rho) {
            return Err(GaplmError::Generation(format!("latent correlation {latent_rho} outside [0, 1]")));
        }
        if let Some(&bad) = p.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(GaplmError::Generation(format!("marginal probability {bad} outside (0, 1)")));
        }
        Ok(Self { p: p.to_vec(), thresholds: p.iter().map(|&v| normal_quantile(v)).collect(), latent_rho })
    }

    /// Average binary correlation over all pairs implied by latent `rho`.
    pub fn mean_pair_correlation(p: &[f64], thresholds: &[f64], rho: f64) -> f64 {
        let t = p.len();
        if t < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..t {
            for j in 0..i {
                let p11 = bivariate_normal_cdf(thresholds[i], thresholds[j], rho);
                s += (p11 - p[i] * p[j]) / (p[i] * (1.0 - p[i]) * p[j] * (1.0 - p[j])).sqrt();
            }
        }
        s / (t * (t - 1) / 2) as f64
    }

    /// Bisection on the latent correlation so the mean pairwise binary
    /// correlation equals `target`.
    pub fn calibrate(p: &[f64], target: f64) -> Result<Self> {
        let mut dg = Self::with_latent(p, 0.0)?;
        if p.len() < 2 || target == 0.0 {
            return Ok(dg);
        }
        if !(0.0..1.0).contains(&target) {
            return Err(GaplmError::Generation(format!("target correlation {target} outside [0, 1)")));
        }
        let f = |r: f64| Self::mean_pair_correlation(p, &dg.thresholds, r) - target;
        if f(MAX_LATENT_RHO) < 0.0 {
            return Err(GaplmError::Generation(format!("binary correlation {target} is infeasible for these marginals")));
        }
        let (mut lo, mut hi) = (0.0, MAX_LATENT_RHO);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        dg.latent_rho = 0.5 * (lo + hi);
        Ok(dg)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let w: f64 = rng.sample(StandardNormal);
        let a = self.latent_rho.sqrt();
        let b = (1.0 - self.latent_rho).sqrt();
        self.thresholds
            .iter()
            .map(|&c| {
                let e: f64 = rng.sample(StandardNormal);
                if a * w + b * e <= c {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Which estimator a study fits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MethodVariant {
    /// Penalized fit with EBIC-selected lambda.
    Scad,
    /// Unpenalized fit of every component.
    Full,
    /// Unpenalized fit of the true components only.
    Oracle,
}

impl fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodVariant::Scad => "SCAD",
            MethodVariant::Full => "FULL",
            MethodVariant::Oracle => "ORACLE",
        })
    }
}

impl std::str::FromStr for MethodVariant {
    type Err = GaplmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SCAD" => Ok(MethodVariant::Scad),
            "FULL" => Ok(MethodVariant::Full),
            "ORACLE" => Ok(MethodVariant::Oracle),
            other => Err(GaplmError::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub design: SimDesign,
    pub method: MethodVariant,
    /// Structure, spline degree and solver settings. For [`MethodVariant::Scad`]
    /// the penalty kind is taken from here as well.
    pub fit: FitConfig,
    pub tuning: TuningConfig,
    pub replications: usize,
    pub seed: u64,
    /// Worker threads; 0 uses rayon's default.
    pub threads: usize,
    pub test_clusters: usize,
}

impl StudyConfig {
    pub fn new(design: SimDesign, method: MethodVariant, structure: WorkingStructure, replications: usize, seed: u64) -> Self {
        let fit = FitConfig { structure, family: design.truth.family, ..FitConfig::default() };
        Self { design, method, fit, tuning: TuningConfig::default(), replications, seed, threads: 0, test_clusters: TEST_CLUSTERS }
    }

    pub fn label(&self) -> String {
        format!("{} {} {} p={}", self.design.label(), self.fit.structure, self.method, self.fit.degree)
    }
}

/// RNG of replication `rep`: the study seed selects the key and the
/// replication index the stream.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// Generates, fits and scores one replication.
pub fn run_replication(cfg: &StudyConfig, rep: usize) -> ReplicationRecord {
    match replication_inner(cfg, rep) {
        Ok(r) => r,
        Err(e) => ReplicationRecord::failed(rep, e.to_string()),
    }
}

fn replication_inner(cfg: &StudyConfig, rep: usize) -> Result<ReplicationRecord> {
    let design = &cfg.design;
    let truth = &design.truth;
    let mut rng = replication_rng(cfg.seed, rep);
    let train = design.generate(&mut rng)?;
    let test = design.test_set(cfg.test_clusters, &mut rng)?;
    let fit_cfg = FitConfig { family: truth.family, ..cfg.fit.clone() };
    let all_x: Vec<usize> = (0..design.d_x).collect();
    let all_z: Vec<usize> = (0..design.d_z).collect();
    let (x_cols, z_cols) = match cfg.method {
        MethodVariant::Oracle => (truth.nonzero_x(), truth.nonzero_z()),
        _ => (all_x, all_z),
    };
    let data = if cfg.method == MethodVariant::Oracle { train.select_columns(&x_cols, &z_cols)? } else { train };
    let model = QifModel::from_config(&data, &fit_cfg)?;
    let (theta, lambda, selection) = match cfg.method {
        MethodVariant::Scad => {
            let sel = select_lambda(&model, &fit_cfg, &cfg.tuning)?;
            let s = sel.report.selection();
            (sel.report.theta, Some(sel.lambda), s)
        }
        MethodVariant::Full | MethodVariant::Oracle => {
            let opts = SolverOptions::from(&fit_cfg);
            let f = model.fit_unpenalized(None, &opts)?;
            let s = Selection::new(z_cols.iter().copied(), x_cols.iter().copied());
            (f.theta, None, s)
        }
    };
    let predictor = FittedMean::from_submodel(&model, &theta, &x_cols, &z_cols)?;
    let me = model_error(&predictor, truth, &test)?;
    let mut beta = vec![0.0; design.d_z];
    for (b, &j) in predictor.unit_centered_beta()?.iter().zip(&z_cols) {
        beta[j] = *b;
    }
    Ok(ReplicationRecord {
        replication: rep,
        lambda,
        selected_linear: selection.linear.iter().copied().collect(),
        selected_groups: selection.groups.iter().copied().collect(),
        class: Some(classify_selection(&selection, &truth.selection())),
        model_error: Some(me),
        beta,
        failure: None,
    })
}

/// Runs every replication and aggregates them in replication order, so the
/// summary does not depend on the number of workers.
pub fn run_study(cfg: &StudyConfig) -> Result<StudySummary> {
    if cfg.replications == 0 {
        return Err(GaplmError::Config("a study needs at least one replication".into()));
    }
    if cfg.method == MethodVariant::Scad && cfg.fit.penalty == PenaltyKind::None {
        return Err(GaplmError::Config("the SCAD method needs a penalty".into()));
    }
    cfg.fit.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| GaplmError::Config(format!("thread pool: {e}")))?;
    let records: Vec<ReplicationRecord> =
        pool.install(|| (0..cfg.replications).into_par_iter().map(|rep| run_replication(cfg, rep)).collect());
    Ok(StudySummary::from_records(cfg.label(), records))
}
