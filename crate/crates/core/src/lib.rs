//! Generalized additive partial linear models for clustered data.
//!
//! Marginal means `g(mu) = sum_l alpha_l(x_l) + z^T beta` are fitted by
//! quadratic inference functions with spline approximations of the
//! `alpha_l`, and both kinds of component are selected with a doubly
//! penalized (SCAD or LASSO) objective tuned by EBIC.

pub mod correlation;
pub mod error;
pub mod family;
pub mod linalg;
pub mod types;
pub mod spline;
pub mod qif;
pub mod penalty;
pub mod tuning;
pub mod metrics;
pub mod sim;

pub use correlation::WorkingStructure;
pub use error::{GaplmError, Result};
pub use family::Family;
pub use types::{Cluster, ClusterDataset, CnUpdate, FitConfig, PenaltyKind, Theta, ThetaLayout};
