//! Dataset, parameter-vector and configuration records.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correlation::WorkingStructure;
use crate::error::{GaplmError, Result};
use crate::family::Family;

/// One cluster (subject): `T_i` repeated observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub y: DVector<f64>,
    /// `T_i x d_x`, values in `[0, 1]`.
    pub x: DMatrix<f64>,
    /// `T_i x d_z`, first column is the intercept.
    pub z: DMatrix<f64>,
}

impl Cluster {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Self {
        Self { y, x, z }
    }

    pub fn size(&self) -> usize {
        self.y.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterDataset {
    pub clusters: Vec<Cluster>,
    pub d_x: usize,
    pub d_z: usize,
}

impl ClusterDataset {
    pub fn new(clusters: Vec<Cluster>, d_x: usize, d_z: usize) -> Self {
        Self { clusters, d_x, d_z }
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Cluster::size).collect()
    }

    /// All responses concatenated cluster by cluster.
    pub fn y_all(&self) -> Vec<f64> {
        self.clusters.iter().flat_map(|c| c.y.iter().copied()).collect()
    }

    /// Keeps only the listed X and Z columns (in the given order).
    pub fn select_columns(&self, x_cols: &[usize], z_cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = x_cols.iter().find(|&&j| j >= self.d_x) {
            return Err(GaplmError::Dimension(format!("x column {bad} >= d_x={}", self.d_x)));
        }
        if let Some(&bad) = z_cols.iter().find(|&&j| j >= self.d_z) {
            return Err(GaplmError::Dimension(format!("z column {bad} >= d_z={}", self.d_z)));
        }
        let clusters = self
            .clusters
            .iter()
            .map(|c| Cluster {
                y: c.y.clone(),
                x: c.x.select_columns(x_cols),
                z: c.z.select_columns(z_cols),
            })
            .collect();
        Ok(Self { clusters, d_x: x_cols.len(), d_z: z_cols.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    XOutOfRange { cluster: usize, row: usize, col: usize, value: f64 },
    MissingIntercept { cluster: usize },
    DimensionMismatch { cluster: usize, detail: String },
    EmptyCluster { cluster: usize },
    NonFinite { cluster: usize },
    NoClusters,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::XOutOfRange { cluster, row, col, value } => write!(
                f,
                "X out of range: cluster {cluster}, row {row}, column {col} has value {value}"
            ),
            Violation::MissingIntercept { cluster } => {
                write!(f, "missing intercept: first Z column of cluster {cluster} is not all 1")
            }
            Violation::DimensionMismatch { cluster, detail } => {
                write!(f, "dimension mismatch: cluster {cluster}: {detail}")
            }
            Violation::EmptyCluster { cluster } => write!(f, "dimension mismatch: cluster {cluster} is empty"),
            Violation::NonFinite { cluster } => write!(f, "non-finite value in cluster {cluster}"),
            Violation::NoClusters => write!(f, "dimension mismatch: dataset has no clusters"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let msg: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        Err(GaplmError::Domain(msg.join("; ")))
    }
}

pub fn validate_dataset(ds: &ClusterDataset) -> ValidationReport {
    let mut v = Vec::new();
    if ds.clusters.is_empty() {
        v.push(Violation::NoClusters);
    }
    if ds.d_z == 0 {
        v.push(Violation::MissingIntercept { cluster: 0 });
    }
    for (i, c) in ds.clusters.iter().enumerate() {
        let t = c.y.len();
        if t == 0 {
            v.push(Violation::EmptyCluster { cluster: i });
            continue;
        }
        let mut shape_ok = true;
        if c.x.nrows() != t || c.z.nrows() != t {
            shape_ok = false;
            v.push(Violation::DimensionMismatch {
                cluster: i,
                detail: format!("Y has {t} rows, X has {}, Z has {}", c.x.nrows(), c.z.nrows()),
            });
        }
        if c.x.ncols() != ds.d_x || c.z.ncols() != ds.d_z {
            shape_ok = false;
            v.push(Violation::DimensionMismatch {
                cluster: i,
                detail: format!(
                    "X is {}x{} and Z is {}x{}, expected d_x={} and d_z={}",
                    c.x.nrows(),
                    c.x.ncols(),
                    c.z.nrows(),
                    c.z.ncols(),
                    ds.d_x,
                    ds.d_z
                ),
            });
        }
        if !shape_ok {
            continue;
        }
        if c.y.iter().chain(c.x.iter()).chain(c.z.iter()).any(|a| !a.is_finite()) {
            v.push(Violation::NonFinite { cluster: i });
        }
        for row in 0..t {
            for col in 0..ds.d_x {
                let value = c.x[(row, col)];
                if !(0.0..=1.0).contains(&value) {
                    v.push(Violation::XOutOfRange { cluster: i, row, col, value });
                }
            }
        }
        if ds.d_z > 0 && c.z.column(0).iter().any(|&a| a != 1.0) {
            v.push(Violation::MissingIntercept { cluster: i });
        }
    }
    ValidationReport { violations: v }
}

/// Shape of the packed parameter vector `(beta, gamma_1, ..., gamma_{d_x})`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub d_z: usize,
    pub d_x: usize,
    pub j_n: usize,
}

impl ThetaLayout {
    pub fn new(d_z: usize, d_x: usize, j_n: usize) -> Self {
        Self { d_z, d_x, j_n }
    }

    pub fn len(&self) -> usize {
        self.d_z + self.d_x * self.j_n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Packed index range of group `l`.
    pub fn group_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.d_z + l * self.j_n;
        start..start + self.j_n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theta {
    pub beta: DVector<f64>,
    pub gamma: Vec<DVector<f64>>,
}

impl Theta {
    pub fn zeros(layout: ThetaLayout) -> Self {
        Self {
            beta: DVector::zeros(layout.d_z),
            gamma: vec![DVector::zeros(layout.j_n); layout.d_x],
        }
    }

    pub fn pack(&self) -> DVector<f64> {
        let len = self.beta.len() + self.gamma.iter().map(|g| g.len()).sum::<usize>();
        let mut out = Vec::with_capacity(len);
        out.extend(self.beta.iter());
        for g in &self.gamma {
            out.extend(g.iter());
        }
        DVector::from_vec(out)
    }

    pub fn unpack(v: &DVector<f64>, d_z: usize, d_x: usize, j_n: usize) -> Result<Self> {
        let layout = ThetaLayout::new(d_z, d_x, j_n);
        if v.len() != layout.len() {
            return Err(GaplmError::Dimension(format!(
                "packed length {} but d_z + d_x*J_n = {d_z} + {d_x}*{j_n} = {}",
                v.len(),
                layout.len()
            )));
        }
        let beta = v.rows(0, d_z).into_owned();
        let gamma = (0..d_x).map(|l| v.rows(d_z + l * j_n, j_n).into_owned()).collect();
        Ok(Self { beta, gamma })
    }

    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout::new(self.beta.len(), self.gamma.len(), self.gamma.first().map_or(0, |g| g.len()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Scad,
    Lasso,
    None,
}

impl std::str::FromStr for PenaltyKind {
    type Err = GaplmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scad" => Ok(PenaltyKind::Scad),
            "lasso" | "l1" => Ok(PenaltyKind::Lasso),
            "none" => Ok(PenaltyKind::None),
            other => Err(GaplmError::Config(format!("unknown penalty '{other}'"))),
        }
    }
}

/// Whether `C_n` is re-evaluated at every Newton iterate or held at its
/// value at the starting point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CnUpdate {
    #[default]
    Varying,
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Spline degree `p`; the spline order is `p + 1`.
    pub degree: usize,
    pub structure: WorkingStructure,
    pub family: Family,
    pub lambda_grid: Vec<f64>,
    pub penalty: PenaltyKind,
    pub scad_a: f64,
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// `C_n` ridge relative to `trace(C_n)/dim`; zero switches to a
    /// pseudo-inverse.
    pub ridge: f64,
    pub cn_update: CnUpdate,
    /// `C_n` handling inside penalized fits; `frozen` holds it at the
    /// starting estimate.
    pub penalized_cn_update: CnUpdate,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            degree: 1,
            structure: WorkingStructure::Exchangeable,
            family: Family::GaussianIdentity,
            lambda_grid: vec![0.0],
            penalty: PenaltyKind::Scad,
            scad_a: 3.7,
            epsilon: 1e-6,
            tol: 1e-6,
            max_iter: 100,
            ridge: 1e-8,
            cn_update: CnUpdate::Varying,
            penalized_cn_update: CnUpdate::Frozen,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GaplmError::Config(m));
        if self.degree < 1 {
            return bad("spline degree must be at least 1".into());
        }
        if self.lambda_grid.is_empty() {
            return bad("lambda grid is empty".into());
        }
        if self.lambda_grid.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return bad("lambda grid entries must be finite and non-negative".into());
        }
        if !(self.scad_a > 2.0) {
            return bad(format!("scad_a must exceed 2, got {}", self.scad_a));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("ridge must be non-negative, got {}", self.ridge));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(t: usize, x: f64) -> ClusterDataset {
        let c = Cluster::new(
            DVector::from_element(t, 0.5),
            DMatrix::from_element(t, 1, x),
            DMatrix::from_element(t, 1, 1.0),
        );
        ClusterDataset::new(vec![c], 1, 1)
    }

    #[test]
    fn out_of_range_x_is_reported() {
        let r = validate_dataset(&toy(3, 1.2));
        assert!(!r.is_ok());
        assert!(r.violations.iter().all(|v| v.to_string().starts_with("X out of range")));
    }

    #[test]
    fn well_formed_dataset_passes() {
        assert!(validate_dataset(&toy(3, 0.4)).is_ok());
    }

    #[test]
    fn short_x_is_dimension_mismatch() {
        let c = Cluster::new(
            DVector::zeros(3),
            DMatrix::from_element(2, 1, 0.5),
            DMatrix::from_element(3, 1, 1.0),
        );
        let r = validate_dataset(&ClusterDataset::new(vec![c], 1, 1));
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].to_string().starts_with("dimension mismatch"));
    }

    #[test]
    fn non_unit_first_z_column_is_missing_intercept() {
        let mut ds = toy(2, 0.5);
        ds.clusters[0].z[(1, 0)] = 0.0;
        let r = validate_dataset(&ds);
        assert!(r.violations[0].to_string().starts_with("missing intercept"));
    }

    #[test]
    fn pack_small() {
        let th = Theta {
            beta: DVector::from_vec(vec![1.0, 2.0]),
            gamma: vec![DVector::from_vec(vec![3.0, 4.0])],
        };
        assert_eq!(th.pack().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_theta_round_trips() {
        let layout = ThetaLayout::new(3, 2, 4);
        let z = Theta::zeros(layout);
        assert_eq!(Theta::unpack(&z.pack(), 3, 2, 4).unwrap(), z);
    }

    #[test]
    fn wrong_length_is_dimension_error() {
        let v = DVector::zeros(5);
        assert!(matches!(Theta::unpack(&v, 2, 1, 2), Err(GaplmError::Dimension(_))));
    }

    #[test]
    fn default_config_is_valid() {
        FitConfig::default().validate().unwrap();
        let cfg = FitConfig { scad_a: 2.0, ..FitConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = FitConfig { structure: WorkingStructure::Ar1, ..FitConfig::default() };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"ar1\""));
        let back: FitConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let partial: FitConfig = serde_json::from_str(r#"{"family":"binomial-logit"}"#).unwrap();
        assert_eq!(partial.family, Family::BinomialLogit);
        assert_eq!(partial.scad_a, 3.7);
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(
            d_z in 0usize..6, d_x in 0usize..6, j_n in 1usize..7,
            seed in any::<u64>(),
        ) {
            let layout = ThetaLayout::new(d_z, d_x, j_n);
            let mut s = seed;
            let v = DVector::from_fn(layout.len(), |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            });
            let th = Theta::unpack(&v, d_z, d_x, j_n).unwrap();
            prop_assert_eq!(th.pack(), v);
            prop_assert_eq!(Theta::unpack(&th.pack(), d_z, d_x, j_n).unwrap(), th);
        }
    }
}
