//! Regressor decomposition and the `mu` machinery.
//!
//! The torque regression `Phi` splits into `Phi1(omega, y)`, whose transpose is
//! a Jacobian and integrates to `mu1`, and `Phi2(omega, Omega, q_e)`, whose
//! transpose is not. `Phi2` is reconfigured row by row with filter states
//! `omega_hat` substituted for the off-row rate components, which makes the
//! partial-differential equation `d mu2 / d omega = Phi2_hat^T` solvable by
//! three one-dimensional integrals. Row `i` of `Phi2` is affine in `omega_i`,
//! so each integral evaluates exactly as `omega_i` times the row at the
//! midpoint `omega_i / 2`.
//!
//! `mu_bar_dot` is the time derivative of `mu` holding `omega` fixed; it is
//! assembled analytically through the product rule and never touches the
//! angular acceleration.

use crate::attmath::{
    kinematics_matrix, lmap, rotmat, skew, Mat3, Mat3x6, UnitQuaternion, Vec3, Vec6,
};
use crate::errstate::{gibbs_vector, TrackingError};
use crate::plant::ReferenceState;
use crate::Result;

/// Reference quantities resolved in the body frame:
/// `C = C(q_e)`, `Omega = C omega_r`, `Omega_bar = C omega_r_dot`.
#[derive(Debug, Clone, Copy)]
pub struct BodyFrameReference {
    pub c: Mat3,
    pub omega_r_body: Vec3,
    pub omega_r_dot_body: Vec3,
}

impl BodyFrameReference {
    pub fn new(q_e: &UnitQuaternion, reference: &ReferenceState) -> Self {
        let c = rotmat(q_e);
        Self {
            c,
            omega_r_body: c * reference.omega_r,
            omega_r_dot_body: c * reference.omega_r_dot,
        }
    }
}

/// The regressor family evaluated at one instant.
#[derive(Debug, Clone, Copy)]
pub struct RegressorBundle {
    pub phi: Mat3x6,
    pub phi1: Mat3x6,
    pub phi2: Mat3x6,
    pub phi2_hat: Mat3x6,
    pub psi: Mat3x6,
    pub y: Vec3,
    pub y_bar: Vec3,
}

/// `y = -Omega_bar - k_p Omega + k_p Lambda q_ev + xi - Lambda Q(q_e) Omega`.
///
/// Independent of `omega`; collects every measurable term of the bracketed
/// regression argument that survives when the body rates are stripped out.
pub fn build_y(err: &TrackingError, frames: &BodyFrameReference, k_p: f64) -> Result<Vec3> {
    let xi = gibbs_vector(&err.q_e)?;
    let q_mat = kinematics_matrix(&err.q_e);
    Ok(-frames.omega_r_dot_body - k_p * frames.omega_r_body
        + k_p * err.lambda_slope * err.q_e.vector()
        + xi
        - err.lambda_slope * q_mat * frames.omega_r_body)
}

/// `Phi2` evaluated at an arbitrary rate argument `v`:
/// `-S(v) L[v] + L[S(v) Omega] + Lambda L[Q v]`.
///
/// Row `i` of the reconfigured regressor is row `i` of this expression with
/// the off-row components of `v` replaced by filter states.
pub(crate) fn phi2_at(v: &Vec3, omega_r_body: &Vec3, q_mat: &Mat3, lambda: f64) -> Mat3x6 {
    -skew(v) * lmap(v) + lmap(&(skew(v) * omega_r_body)) + lambda * lmap(&(q_mat * v))
}

/// Total time derivative of [`phi2_at`] for given argument rates.
pub(crate) fn phi2_dot_at(
    v: &Vec3,
    v_dot: &Vec3,
    omega_r_body: &Vec3,
    omega_r_body_dot: &Vec3,
    q_mat: &Mat3,
    q_mat_dot: &Mat3,
    lambda: f64,
) -> Mat3x6 {
    -skew(v_dot) * lmap(v) - skew(v) * lmap(v_dot)
        + lmap(&(skew(v_dot) * omega_r_body + skew(v) * omega_r_body_dot))
        + lambda * lmap(&(q_mat_dot * v + q_mat * v_dot))
}

/// Build the full regressor family from the measured rate, the tracking error,
/// the body-frame reference signals and the rate-filter state.
pub fn build_regressors(
    omega: &Vec3,
    err: &TrackingError,
    frames: &BodyFrameReference,
    omega_hat: &Vec3,
    k_p: f64,
) -> Result<RegressorBundle> {
    let lambda = err.lambda_slope;
    let q_mat = kinematics_matrix(&err.q_e);
    let y = build_y(err, frames, k_p)?;

    let phi1 = k_p * lmap(omega) + lmap(&y);
    let phi2 = phi2_at(omega, &frames.omega_r_body, &q_mat, lambda);

    let mut phi2_hat = Mat3x6::zeros();
    for i in 0..3 {
        let mut v = *omega_hat;
        v[i] = omega[i];
        let row_src = phi2_at(&v, &frames.omega_r_body, &q_mat, lambda);
        phi2_hat.set_row(i, &row_src.row(i));
    }

    let psi = phi2_hat - phi2;
    let phi = phi1 + phi2;
    let y_bar = y
        + k_p * omega
        + skew(omega) * frames.omega_r_body
        + lambda * q_mat * omega;

    Ok(RegressorBundle { phi, phi1, phi2, phi2_hat, psi, y, y_bar })
}

/// Quadratic rate monomials `[w1^2/2, w2^2/2, w3^2/2, w2 w3, w1 w3, w1 w2]`,
/// the potential of `L^T[omega]`.
pub fn omega_bar(omega: &Vec3) -> Vec6 {
    let (w1, w2, w3) = (omega.x, omega.y, omega.z);
    Vec6::new(0.5 * w1 * w1, 0.5 * w2 * w2, 0.5 * w3 * w3, w2 * w3, w1 * w3, w1 * w2)
}

/// `mu1 = L^T[y] omega + k_p omega_bar`, a potential of `Phi1^T`.
pub fn mu1(omega: &Vec3, y: &Vec3, k_p: f64) -> Vec6 {
    lmap(y).transpose() * omega + k_p * omega_bar(omega)
}

/// `mu2`: the three row integrals of the reconfigured regressor.
///
/// Row `i` of `Phi2` is affine in its own rate component, so each integral is
/// the row evaluated at the midpoint times the integration length.
pub fn mu2(
    omega: &Vec3,
    omega_hat: &Vec3,
    omega_r_body: &Vec3,
    q_e: &UnitQuaternion,
    lambda: f64,
) -> Vec6 {
    let q_mat = kinematics_matrix(q_e);
    let mut out = Vec6::zeros();
    for i in 0..3 {
        let mut v = *omega_hat;
        v[i] = 0.5 * omega[i];
        let rows = phi2_at(&v, omega_r_body, &q_mat, lambda);
        out += omega[i] * rows.row(i).transpose();
    }
    out
}

/// `mu = mu1 + mu2`.
pub fn mu(
    omega: &Vec3,
    omega_hat: &Vec3,
    y: &Vec3,
    omega_r_body: &Vec3,
    q_e: &UnitQuaternion,
    lambda: f64,
    k_p: f64,
) -> Vec6 {
    mu1(omega, y, k_p) + mu2(omega, omega_hat, omega_r_body, q_e, lambda)
}

/// Rate-filter dynamics `d omega_hat / dt = -y_bar - k_f (omega_hat - omega)`.
pub fn omega_hat_derivative(omega_hat: &Vec3, y_bar: &Vec3, omega: &Vec3, k_f: f64) -> Vec3 {
    -y_bar - k_f * (omega_hat - omega)
}

/// Everything `mu_bar_dot` needs; none of it involves the angular
/// acceleration.
#[derive(Debug, Clone, Copy)]
pub struct MuBarDotInputs {
    /// Measured body rate, held fixed by the partial derivative.
    pub omega: Vec3,
    pub omega_hat: Vec3,
    pub omega_hat_dot: Vec3,
    pub q_e: UnitQuaternion,
    pub omega_e: Vec3,
    /// `Omega = C omega_r`.
    pub omega_r_body: Vec3,
    /// `Omega_bar = C omega_r_dot`.
    pub omega_r_dot_body: Vec3,
    pub c: Mat3,
    pub omega_r_dot: Vec3,
    pub omega_r_ddot: Vec3,
    pub k_p: f64,
    pub lambda: f64,
}

/// Partial time derivative of `mu` with `omega` frozen, differentiated
/// analytically through `{y, omega_hat, q_e, Omega}`.
pub fn mu_bar_dot(inp: &MuBarDotInputs) -> Result<Vec6> {
    let q_ev = inp.q_e.vector();
    let q_e4 = inp.q_e.scalar();
    let q_mat = kinematics_matrix(&inp.q_e);

    let q_ev_dot = q_mat * inp.omega_e;
    let q_e4_dot = -0.5 * q_ev.dot(&inp.omega_e);
    let q_mat_dot = 0.5 * (skew(&q_ev_dot) + q_e4_dot * Mat3::identity());

    gibbs_vector(&inp.q_e)?; // domain check: |q_e4| bounded away from zero
    let xi_dot = (q_ev_dot * q_e4 - q_ev * q_e4_dot) / (q_e4 * q_e4);

    let omega_rb_dot = -skew(&inp.omega_e) * inp.omega_r_body + inp.c * inp.omega_r_dot;
    let omega_rb_bar_dot = -skew(&inp.omega_e) * inp.omega_r_dot_body + inp.c * inp.omega_r_ddot;

    let y_dot = -omega_rb_bar_dot - inp.k_p * omega_rb_dot
        + inp.k_p * inp.lambda * q_ev_dot
        + xi_dot
        - inp.lambda * (q_mat_dot * inp.omega_r_body + q_mat * omega_rb_dot);

    let mut out = lmap(&y_dot).transpose() * inp.omega;
    for i in 0..3 {
        let mut v = inp.omega_hat;
        v[i] = 0.5 * inp.omega[i];
        let mut v_dot = inp.omega_hat_dot;
        v_dot[i] = 0.0;
        let rows = phi2_dot_at(
            &v,
            &v_dot,
            &inp.omega_r_body,
            &omega_rb_dot,
            &q_mat,
            &q_mat_dot,
            inp.lambda,
        );
        out += inp.omega[i] * rows.row(i).transpose();
    }
    Ok(out)
}

/// Max-abs deviation between the finite-difference Jacobian of `mu` and
/// `(Phi + Psi)^T`, the identity that the reconfigured construction solves.
pub fn mu_jacobian_identity_check(
    bundle: &RegressorBundle,
    omega: &Vec3,
    omega_hat: &Vec3,
    omega_r_body: &Vec3,
    q_e: &UnitQuaternion,
    lambda: f64,
    k_p: f64,
    fd_step: f64,
) -> f64 {
    let target = (bundle.phi + bundle.psi).transpose();
    let mut max_dev: f64 = 0.0;
    for j in 0..3 {
        let mut wp = *omega;
        let mut wm = *omega;
        wp[j] += fd_step;
        wm[j] -= fd_step;
        let mp = mu(&wp, omega_hat, &bundle.y, omega_r_body, q_e, lambda, k_p);
        let mm = mu(&wm, omega_hat, &bundle.y, omega_r_body, q_e, lambda, k_p);
        let col = (mp - mm) / (2.0 * fd_step);
        for i in 0..6 {
            max_dev = max_dev.max((col[i] - target[(i, j)]).abs());
        }
    }
    max_dev
}
