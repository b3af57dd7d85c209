//! Control and adaptation laws.
//!
//! The composite controller `u = -Phi (theta_hat + zeta)` treats
//! `theta_hat + zeta` as the inertia estimate, with `zeta = gamma mu`
//! recomputed algebraically at every evaluation and only `theta_hat`
//! integrated. The adaptation combines the manifold-shaping term
//! `-gamma (mu_bar_dot - (Phi+Psi)^T y_bar)` with the prediction-error term
//! `-gamma lambda eps` and, optionally, power terms that buy finite- or
//! fixed-time parameter convergence. A plain certainty-equivalence gradient
//! law on the same regressor serves as comparison baseline.

use serde::{Deserialize, Serialize};

use crate::attmath::{Mat3x6, Vec3, Vec6};
use crate::drem::ScalarLre;
use crate::regressor::RegressorBundle;
use crate::{Error, Result};

/// Full gain set. `k_p` and `k_f` are derived, never set directly:
/// `k_p = k_f = kappa (f_m + 1)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    /// Barrier gain.
    pub alpha: f64,
    /// Filtered-error slope magnitude.
    pub beta: f64,
    /// Target-dynamics gain scale.
    pub kappa: f64,
    /// Ceiling adjustment of the scaling function `f`.
    pub f_m: f64,
    /// Adaptation gain.
    pub gamma: f64,
    /// Prediction-error learning gain.
    pub lambda: f64,
    /// Rate-filter pole.
    pub a: f64,
    /// Extension-filter pole.
    pub b: f64,
    /// Mixing amplification.
    pub k_i: f64,
    /// LTV-extension gain.
    pub k_n: f64,
    /// Finite-time power gain.
    #[serde(default)]
    pub lambda1: f64,
    /// Fixed-time power gain.
    #[serde(default)]
    pub lambda2: f64,
    /// Sub-unity power exponent.
    #[serde(default = "default_iota1")]
    pub iota1: f64,
    /// Above-unity power exponent.
    #[serde(default = "default_iota2")]
    pub iota2: f64,
    /// Gradient gain of the certainty-equivalence baseline.
    #[serde(default = "default_gamma_ce")]
    pub gamma_ce: f64,
}

fn default_iota1() -> f64 {
    0.85
}

fn default_iota2() -> f64 {
    1.1
}

fn default_gamma_ce() -> f64 {
    20.0
}

impl ControllerGains {
    /// Nominal gain set used throughout the shipped scenarios.
    pub fn nominal() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            kappa: 0.5,
            f_m: 2.0,
            gamma: 25.0,
            lambda: 0.01,
            a: 5.0,
            b: 0.5,
            k_i: 1e9,
            k_n: 8.0,
            lambda1: 0.0,
            lambda2: 0.0,
            iota1: 0.85,
            iota2: 1.1,
            gamma_ce: 20.0,
        }
    }

    /// Target-dynamics gain, tied to the scaling ceiling.
    pub fn k_p(&self) -> f64 {
        self.kappa * (self.f_m + 1.0)
    }

    /// Rate-filter gain; equal to `k_p` by construction.
    pub fn k_f(&self) -> f64 {
        self.k_p()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("kappa", self.kappa),
            ("f_m", self.f_m),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("a", self.a),
            ("b", self.b),
            ("k_n", self.k_n),
            ("gamma_ce", self.gamma_ce),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("gain `{name}` must be positive, got {value}")));
            }
        }
        if !(self.k_i.is_finite() && self.k_i >= 1.0) {
            return Err(Error::Config(format!("gain `k_i` must be >= 1, got {}", self.k_i)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("power gains lambda1/lambda2 must be non-negative".into()));
        }
        if !(self.iota1 > 0.0 && self.iota1 < 1.0) {
            return Err(Error::Config(format!("iota1 must lie in (0, 1), got {}", self.iota1)));
        }
        if self.iota2 <= 1.0 {
            return Err(Error::Config(format!("iota2 must exceed 1, got {}", self.iota2)));
        }
        Ok(())
    }
}

/// Which adaptation law drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorVariant {
    /// Composite law, exponential convergence (no power terms).
    Exponential,
    /// Composite law plus the sub-unity power term.
    FiniteTime,
    /// Composite law plus both power terms.
    FixedTime,
    /// Certainty-equivalence gradient baseline.
    CeBaseline,
}

impl EstimatorVariant {
    /// Effective power gains for this variant.
    pub fn power_gains(&self, gains: &ControllerGains) -> (f64, f64) {
        match self {
            EstimatorVariant::Exponential | EstimatorVariant::CeBaseline => (0.0, 0.0),
            EstimatorVariant::FiniteTime => (gains.lambda1, 0.0),
            EstimatorVariant::FixedTime => (gains.lambda1, gains.lambda2),
        }
    }
}

/// Integrated estimator state and its algebraic companion.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorState {
    /// Integrated part of the estimate.
    pub theta_hat: Vec6,
    /// `zeta = gamma mu`, recomputed from the current signals, never integrated.
    pub zeta: Vec6,
}

impl EstimatorState {
    /// The inertia estimate `theta_hat + zeta`.
    pub fn estimate(&self) -> Vec6 {
        self.theta_hat + self.zeta
    }
}

/// Control law `u = -Phi (theta_hat + zeta)`.
pub fn control_torque(phi: &Mat3x6, theta_estimate: &Vec6) -> Vec3 {
    -(phi * theta_estimate)
}

/// Prediction error `eps = Delta_N (theta_hat + zeta) - Y_N`, equal to
/// `Delta_N theta_tilde` along exact trajectories.
pub fn prediction_error(theta_estimate: &Vec6, lre: &ScalarLre) -> Vec6 {
    lre.delta_n * theta_estimate - lre.y_n
}

/// Norm-normalized sign: `x / |x|`, extended by zero at the origin.
pub fn norm_sign(x: &Vec6) -> Vec6 {
    let n = x.norm();
    if n == 0.0 {
        Vec6::zeros()
    } else {
        x / n
    }
}

/// Power term `Theta = lambda1 |eps|^{iota1} Sign_n(eps)
///                   + lambda2 |eps|^{iota2} Sign_n(eps)`.
pub fn power_term(eps: &Vec6, lambda1: f64, lambda2: f64, iota1: f64, iota2: f64) -> Vec6 {
    let n = eps.norm();
    if n == 0.0 {
        return Vec6::zeros();
    }
    (lambda1 * n.powf(iota1) + lambda2 * n.powf(iota2)) * (eps / n)
}

/// Composite adaptation
/// `theta_hat_dot = -gamma [mu_bar_dot - (Phi + Psi)^T y_bar]
///                  - gamma (lambda eps + Theta)`.
pub fn theta_hat_derivative(
    bundle: &RegressorBundle,
    mu_bar_dot: &Vec6,
    eps: &Vec6,
    gamma: f64,
    lambda: f64,
    power: &Vec6,
) -> Vec6 {
    -gamma * (mu_bar_dot - (bundle.phi + bundle.psi).transpose() * bundle.y_bar)
        - gamma * (lambda * eps + power)
}

/// Baseline torque `u = -Phi theta_hat_ce`.
pub fn ce_baseline_torque(phi: &Mat3x6, theta_hat_ce: &Vec6) -> Vec3 {
    -(phi * theta_hat_ce)
}

/// Classical gradient adaptation on the filtered error,
/// `theta_hat_ce_dot = gamma_ce Phi^T s`; paired with `u = -Phi theta_hat_ce`
/// this sign makes the usual quadratic Lyapunov cross terms cancel.
pub fn ce_baseline_adaptation(phi: &Mat3x6, s: &Vec3, gamma_ce: f64) -> Vec6 {
    gamma_ce * (phi.transpose() * s)
}
