//! Tracking-error construction, the barrier attitude-error function and its
//! algebraic bounds.
//!
//! The barrier `V_q = -alpha ln(q_e4^2)` blows up as `q_e4 -> 0`, which pins
//! the error quaternion inside one of the two hemispheres fixed by the sign of
//! `q_e4(0)` and rules out unwinding. The slope `Lambda = beta * sign(q_e4(0))`
//! is frozen at initialization and never re-evaluated.

use serde::{Deserialize, Serialize};

use crate::attmath::{quat_error, rotmat, UnitQuaternion, Vec3};
use crate::plant::{BodyState, ReferenceState};
use crate::{Error, Result};

/// Barrier gain and filtered-error slope, both strictly positive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AefParams {
    pub alpha: f64,
    pub beta: f64,
}

impl AefParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha <= 0.0 || beta <= 0.0 {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        Ok(Self { alpha, beta })
    }
}

/// Attitude and rate tracking errors together with the filtered error
/// `s = omega_e + Lambda q_ev`.
#[derive(Debug, Clone, Copy)]
pub struct TrackingError {
    pub q_e: UnitQuaternion,
    pub omega_e: Vec3,
    pub s: Vec3,
    /// Lambda, frozen at t = 0 with the sign of q_e4(0) and magnitude beta.
    pub lambda_slope: f64,
}

/// Freeze the filtered-error slope from the initial error quaternion scalar.
///
/// Rejects initial conditions outside the permissible set `q_e4 != 0`.
pub fn lambda_from_initial(q_e4_initial: f64, beta: f64) -> Result<f64> {
    if q_e4_initial.abs() < 1e-6 {
        return Err(Error::OutsidePermissibleSet { value: q_e4_initial.abs() });
    }
    Ok(beta * q_e4_initial.signum())
}

/// Assemble the tracking error from a (possibly measured) body state and the
/// current reference sample.
pub fn make_tracking_error(
    body: &BodyState,
    reference: &ReferenceState,
    lambda_slope: f64,
) -> TrackingError {
    let q_e = quat_error(&body.q, &reference.q_r);
    let c = rotmat(&q_e);
    let omega_e = body.omega - c * reference.omega_r;
    let s = omega_e + lambda_slope * q_e.vector();
    TrackingError { q_e, omega_e, s, lambda_slope }
}

/// Barrier attitude-error function `V_q = -alpha ln(q_e4^2) >= 0`.
pub fn barrier_value(q_e: &UnitQuaternion, alpha: f64) -> Result<f64> {
    let w = q_e.scalar();
    if w.abs() < 1e-12 {
        return Err(Error::BarrierBlowup { value: w.abs() });
    }
    Ok(-alpha * (w * w).ln())
}

/// Gibbs vector `xi = q_ev / q_e4`.
pub fn gibbs_vector(q_e: &UnitQuaternion) -> Result<Vec3> {
    let w = q_e.scalar();
    if w.abs() < 1e-12 {
        return Err(Error::BarrierBlowup { value: w.abs() });
    }
    Ok(q_e.vector() / w)
}

/// Slack of the logarithm bound `-ln(q_e4^2) <= (1 - q_e4^2) / |q_e4|`:
/// returns `(1 - x^2)/|x| + ln(x^2)`, which is non-negative on 0 < |x| <= 1.
pub fn lemma1_gap(q_e4: f64) -> f64 {
    let x = q_e4.abs();
    (1.0 - x * x) / x + (x * x).ln()
}

/// Sandwich constants for the barrier on `delta <= |q_e4| <= 1`:
/// `lower * |q_ev|^2 <= V_q <= upper * |q_ev|^2` with
/// `lower = min(1, alpha)` and `upper = -alpha ln(delta^2) / (1 - delta^2)`.
pub fn lemma2_bounds(delta: f64, alpha: f64) -> (f64, f64) {
    debug_assert!(delta > 0.0 && delta < 1.0 && alpha > 0.0);
    let lower = alpha.min(1.0);
    let d2 = delta * delta;
    let upper = -alpha * d2.ln() / (1.0 - d2);
    (lower, upper)
}
