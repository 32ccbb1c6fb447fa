//! Link and variance functions for the supported marginal mean models.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GaplmError, Result};

/// Fitted probabilities are kept this far away from 0 and 1 whenever the
/// variance function (or a log-likelihood) is evaluated.
pub const PROB_CLAMP: f64 = 1e-10;

/// Floor applied to the plug-in Gaussian variance in the log-likelihood.
pub const GAUSSIAN_VARIANCE_FLOOR: f64 = 1e-12;

/// Marginal mean model `g(mu) = eta` with variance `phi * V(mu)`.
///
/// The scale `phi` never enters the quadratic inference function, so it is
/// fixed at one throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianIdentity,
    BinomialLogit,
}

impl Family {
    pub fn check_eta(eta: f64) -> Result<()> {
        if eta.is_finite() {
            Ok(())
        } else {
            Err(GaplmError::Numeric(format!("linear predictor {eta}")))
        }
    }

    /// Link `g(mu)`.
    pub fn link(&self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => mu,
            Family::BinomialLogit => {
                let m = mu.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                (m / (1.0 - m)).ln()
            }
        }
    }

    /// Inverse link `g^{-1}(eta)`.
    pub fn mu(&self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => eta,
            // The two branches mirror each other so mu(-eta) == 1 - mu(eta)
            // holds bit for bit.
            Family::BinomialLogit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    1.0 - 1.0 / (1.0 + eta.exp())
                }
            }
        }
    }

    /// `d mu / d eta`.
    pub fn mu_dot(&self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::BinomialLogit => {
                let p = 1.0 / (1.0 + (-eta.abs()).exp());
                p * (1.0 - p)
            }
        }
    }

    /// `d^2 mu / d eta^2`.
    pub fn mu_ddot(&self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 0.0,
            Family::BinomialLogit => {
                let mu = self.mu(eta);
                self.mu_dot(eta) * (1.0 - 2.0 * mu)
            }
        }
    }

    /// Variance function `V(mu)`.
    pub fn variance(&self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::BinomialLogit => {
                let m = mu.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                m * (1.0 - m)
            }
        }
    }

    /// True when a logit mean lies in the clamped region, where scores and
    /// their derivatives lose all information.
    pub fn saturated(&self, mu: f64) -> bool {
        match self {
            Family::GaussianIdentity => false,
            Family::BinomialLogit => mu <= PROB_CLAMP || mu >= 1.0 - PROB_CLAMP,
        }
    }

    /// `dV / d mu`; zero inside the clamped region for the logit family.
    pub fn variance_dot(&self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 0.0,
            Family::BinomialLogit => {
                if mu <= PROB_CLAMP || mu >= 1.0 - PROB_CLAMP {
                    0.0
                } else {
                    1.0 - 2.0 * mu
                }
            }
        }
    }

    /// Minus twice the working-independence log-likelihood.
    ///
    /// The Gaussian version profiles out the variance with the mean squared
    /// residual, floored at [`GAUSSIAN_VARIANCE_FLOOR`].
    pub fn neg2_loglik(&self, y: &[f64], mu: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), mu.len());
        let n = y.len() as f64;
        match self {
            Family::GaussianIdentity => {
                let rss: f64 = y.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                let s2 = (rss / n).max(GAUSSIAN_VARIANCE_FLOOR);
                n * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0)
            }
            Family::BinomialLogit => {
                -2.0 * y
                    .iter()
                    .zip(mu)
                    .map(|(&yy, &m)| {
                        let m = m.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                        yy * m.ln() + (1.0 - yy) * (1.0 - m).ln()
                    })
                    .sum::<f64>()
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::GaussianIdentity => "gaussian-identity",
            Family::BinomialLogit => "binomial-logit",
        })
    }
}

impl FromStr for Family {
    type Err = GaplmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "gaussian-identity" | "identity" => Ok(Family::GaussianIdentity),
            "binomial" | "binomial-logit" | "logit" | "binary" => Ok(Family::BinomialLogit),
            other => Err(GaplmError::Config(format!("unknown family '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FAMILIES: [Family; 2] = [Family::GaussianIdentity, Family::BinomialLogit];

    #[test]
    fn logit_symmetry_point() {
        let f = Family::BinomialLogit;
        assert_eq!(f.mu(0.0), 0.5);
        assert_eq!(f.mu_dot(0.0), 0.25);
        assert_eq!(f.variance(f.mu(0.0)), 0.25);
    }

    #[test]
    fn identity_values() {
        let f = Family::GaussianIdentity;
        assert_eq!(f.mu(3.7), 3.7);
        assert_eq!(f.mu_dot(3.7), 1.0);
        assert_eq!(f.variance(3.7), 1.0);
    }

    #[test]
    fn logit_at_log_three() {
        // 1/(1+1/3) = 0.75, 0.75*0.25 = 0.1875
        let f = Family::BinomialLogit;
        let eta = 3f64.ln();
        assert!((f.mu(eta) - 0.75).abs() < 1e-15);
        assert!((f.mu_dot(eta) - 0.1875).abs() < 1e-15);
    }

    #[test]
    fn logit_reflection_is_exact() {
        let f = Family::BinomialLogit;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let eta: f64 = rng.random_range(-30.0..30.0);
            assert_eq!(f.mu(-eta), 1.0 - f.mu(eta));
            assert_eq!(f.mu_dot(-eta), f.mu_dot(eta));
        }
    }

    #[test]
    fn mu_dot_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for f in FAMILIES {
            for _ in 0..100 {
                let eta: f64 = rng.random_range(-6.0..6.0);
                let h = 1e-5;
                let fd = (f.mu(eta + h) - f.mu(eta - h)) / (2.0 * h);
                let an = f.mu_dot(eta);
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-12), "{f} {eta}: {fd} vs {an}");
                let fd2 = (f.mu_dot(eta + h) - f.mu_dot(eta - h)) / (2.0 * h);
                assert!((fd2 - f.mu_ddot(eta)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn variance_positive_on_valid_range() {
        for f in FAMILIES {
            for mu in [0.0, 1e-12, 0.3, 0.999_999, 1.0] {
                assert!(f.variance(mu) > 0.0);
            }
        }
    }

    #[test]
    fn saturation_only_for_logit() {
        assert!(Family::BinomialLogit.saturated(Family::BinomialLogit.mu(-40.0)));
        assert!(Family::BinomialLogit.saturated(Family::BinomialLogit.mu(40.0)));
        assert!(!Family::BinomialLogit.saturated(0.3));
        assert!(!Family::GaussianIdentity.saturated(-1e300));
    }

    #[test]
    fn non_finite_eta_is_rejected() {
        assert!(Family::check_eta(f64::NAN).is_err());
        assert!(Family::check_eta(f64::INFINITY).is_err());
        assert!(Family::check_eta(1.0).is_ok());
    }

    #[test]
    fn bernoulli_half_loglik() {
        let y = [0.0, 1.0, 1.0, 0.0, 1.0];
        let mu = [0.5; 5];
        let v = Family::BinomialLogit.neg2_loglik(&y, &mu);
        assert!((v - 2.0 * 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_perfect_fit_uses_floor() {
        let y = [1.0, 2.0, 3.0];
        let v = Family::GaussianIdentity.neg2_loglik(&y, &y);
        let expect = 3.0 * ((2.0 * std::f64::consts::PI * GAUSSIAN_VARIANCE_FLOOR).ln() + 1.0);
        assert!((v - expect).abs() < 1e-9);
    }
}
