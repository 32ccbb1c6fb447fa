//! Basis matrices spanning (approximately) the inverse working correlation.
//!
//! The quadratic inference function never estimates correlation parameters.
//! Instead `R^{-1}` is written as `a_1 M_1 + ... + a_K M_K` for fixed 0/1
//! matrices `M_k`, and each `M_k` contributes one block of moment conditions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GaplmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkingStructure {
    #[serde(rename = "ind")]
    Independence,
    #[serde(rename = "ec")]
    Exchangeable,
    #[serde(rename = "ar1")]
    Ar1,
}

impl WorkingStructure {
    pub const ALL: [WorkingStructure; 3] = [
        WorkingStructure::Exchangeable,
        WorkingStructure::Ar1,
        WorkingStructure::Independence,
    ];

    /// Number of basis matrices for clusters with more than one observation.
    pub fn n_basis(&self) -> usize {
        match self {
            WorkingStructure::Independence => 1,
            WorkingStructure::Exchangeable | WorkingStructure::Ar1 => 2,
        }
    }

    pub fn basis_matrices(&self, t: usize) -> Result<Vec<DMatrix<f64>>> {
        basis_matrices(*self, t)
    }
}

impl fmt::Display for WorkingStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkingStructure::Independence => "IND",
            WorkingStructure::Exchangeable => "EC",
            WorkingStructure::Ar1 => "AR1",
        })
    }
}

impl FromStr for WorkingStructure {
    type Err = GaplmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ind" | "independence" | "independent" => Ok(WorkingStructure::Independence),
            "ec" | "exchangeable" | "cs" => Ok(WorkingStructure::Exchangeable),
            "ar1" | "ar-1" => Ok(WorkingStructure::Ar1),
            other => Err(GaplmError::Config(format!("unknown working structure '{other}'"))),
        }
    }
}

/// `M_1, ..., M_K` for a cluster of size `t`.
///
/// * IND: `{I}`
/// * EC: `{I, J - I}` (zero diagonal, ones elsewhere)
/// * AR1: `{I, first sub/super-diagonal indicator}`
///
/// A single observation carries no within-cluster information, so every
/// structure reduces to `{[1]}` when `t == 1`.
pub fn basis_matrices(structure: WorkingStructure, t: usize) -> Result<Vec<DMatrix<f64>>> {
    if t == 0 {
        return Err(GaplmError::Domain("cluster size must be at least 1".into()));
    }
    let identity = DMatrix::identity(t, t);
    if t == 1 {
        return Ok(vec![identity]);
    }
    let second = match structure {
        WorkingStructure::Independence => return Ok(vec![identity]),
        WorkingStructure::Exchangeable => DMatrix::from_fn(t, t, |i, j| if i != j { 1.0 } else { 0.0 }),
        WorkingStructure::Ar1 => {
            DMatrix::from_fn(t, t, |i, j| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 })
        }
    };
    Ok(vec![identity, second])
}

/// Exchangeable correlation matrix with parameter `rho`.
pub fn exchangeable_matrix(rho: f64, t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |i, j| if i == j { 1.0 } else { rho })
}

/// AR-1 correlation matrix `rho^{|i-j|}`.
pub fn ar1_matrix(rho: f64, t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Coefficients `(a_1, a_2)` with `a_1 I + a_2 M_2 = R_EC(rho)^{-1}`.
///
/// With `k = (1 - rho)(1 + (t - 1) rho)` the inverse has diagonal
/// `(1 + (t - 2) rho) / k` and off-diagonal `-rho / k`.
pub fn ec_inverse_coeffs(rho: f64, t: usize) -> Result<(f64, f64)> {
    if t == 0 {
        return Err(GaplmError::Domain("cluster size must be at least 1".into()));
    }
    if t == 1 {
        return Ok((1.0, 0.0));
    }
    let lower = -1.0 / (t as f64 - 1.0);
    if !(rho > lower && rho < 1.0) {
        return Err(GaplmError::Domain(format!(
            "exchangeable correlation {rho} is not invertible for T={t} (need {lower} < rho < 1)"
        )));
    }
    let tf = t as f64;
    let k = (1.0 - rho) * (1.0 + (tf - 1.0) * rho);
    Ok(((1.0 + (tf - 2.0) * rho) / k, -rho / k))
}

/// Basis matrices memoised per cluster size, built once for the sizes that
/// occur in a dataset.
#[derive(Clone, Debug)]
pub struct BasisCache {
    structure: WorkingStructure,
    by_size: BTreeMap<usize, Arc<Vec<DMatrix<f64>>>>,
}

impl BasisCache {
    pub fn new(structure: WorkingStructure, sizes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut by_size = BTreeMap::new();
        for t in sizes {
            if let std::collections::btree_map::Entry::Vacant(e) = by_size.entry(t) {
                e.insert(Arc::new(basis_matrices(structure, t)?));
            }
        }
        Ok(Self { structure, by_size })
    }

    pub fn structure(&self) -> WorkingStructure {
        self.structure
    }

    pub fn get(&self, t: usize) -> Option<Arc<Vec<DMatrix<f64>>>> {
        self.by_size.get(&t).cloned()
    }
}
