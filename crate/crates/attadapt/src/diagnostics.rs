//! Analysis-side quantities: dynamic scaling, Lyapunov samples, envelope
//! fits, settling-time bounds and run metrics.
//!
//! Everything here consumes the true inertia parameters and is strictly
//! read-only with respect to the control loop; removing it changes no
//! simulated channel.

use crate::attmath::{InertiaParams, Mat3x6, Vec6};
use crate::controller::ControllerGains;
use crate::drem::{pe_floor_monitor, PeFloor};
use crate::sim::TrajectoryLog;
use crate::{Error, Result};

/// Scaling function `f(r) = f_m tanh(r) + 1`, expressed through
/// `tanh(r)`, the bounded surrogate the simulator integrates.
pub fn f_from_tanh(r_tanh: f64, f_m: f64) -> f64 {
    f_m * r_tanh + 1.0
}

/// Scaling function `f(r)` at a raw `r`.
pub fn f_of_r(r: f64, f_m: f64) -> f64 {
    f_m * r.tanh() + 1.0
}

/// Growth law of the scaling state,
/// `r_dot = gamma f(r) sqrt(ln f(r)) / (df/dr) |Psi|^2` with
/// `df/dr = f_m sech^2(r)`. Rejects non-positive `r`.
pub fn scaling_derivative(r: f64, psi: &Mat3x6, gamma: f64, f_m: f64) -> Result<f64> {
    if r <= 1e-12 {
        return Err(Error::NonPositiveScaling { value: r });
    }
    let f = f_of_r(r, f_m);
    let sech = 1.0 / r.cosh();
    let df_dr = f_m * sech * sech;
    let psi_norm = spectral_norm(psi);
    Ok(gamma * f * f.ln().sqrt() / df_dr * psi_norm * psi_norm)
}

/// The same growth law transported to the surrogate `tanh(r)`:
/// `d tanh(r)/dt = gamma f sqrt(ln f) |Psi|^2 / f_m`. The `sech^2` factors
/// cancel, which keeps the state bounded and the integration benign.
pub fn r_tanh_derivative(r_tanh: f64, psi_norm_sq: f64, gamma: f64, f_m: f64) -> f64 {
    let f = f_from_tanh(r_tanh, f_m);
    gamma * f * f.ln().max(0.0).sqrt() * psi_norm_sq / f_m
}

/// Spectral norm of the 3x6 perturbation matrix.
pub fn spectral_norm(m: &Mat3x6) -> f64 {
    m.singular_values().max()
}

/// Scaling factor `R = sqrt(J_m) e^{-1/(2 J_m^2)} e^{sqrt(ln f)/J_m}`.
pub fn scaling_factor(f_r: f64, j_m: f64) -> f64 {
    (j_m.sqrt() / (1.0 / (2.0 * j_m * j_m)).exp()) * (f_r.ln().max(0.0).sqrt() / j_m).exp()
}

/// Analysis constant `eta = 2 (1/kappa + rho)`.
pub fn eta(kappa: f64, rho: f64) -> f64 {
    2.0 * (1.0 / kappa + rho)
}

/// One Lyapunov-function sample along a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct LyapunovSample {
    pub t: f64,
    pub v_q: f64,
    pub v_s: f64,
    pub v_w: f64,
    pub v_z: f64,
    pub v_total: f64,
}

/// Reconstruct the Lyapunov series from a logged run, using the true
/// parameters. Independent of the values the simulator logged, so it doubles
/// as a cross-check.
pub fn lyapunov_series(
    log: &TrajectoryLog,
    theta_true: &InertiaParams,
    gains: &ControllerGains,
    rho: f64,
) -> Result<Vec<LyapunovSample>> {
    let j_m = theta_true.min_eigenvalue();
    let eta_val = eta(gains.kappa, rho);
    let mut out = Vec::with_capacity(log.records.len());
    for rec in &log.records {
        let q_e = crate::attmath::UnitQuaternion::from_raw_normalized(
            crate::attmath::Vec3::new(rec.derived.q_e[0], rec.derived.q_e[1], rec.derived.q_e[2]),
            rec.derived.q_e[3],
        );
        let v_q = crate::errstate::barrier_value(&q_e, gains.alpha)?;
        let v_s = 0.5 * rec.derived.s.norm_squared();
        let omega_tilde = rec.state.omega_hat - rec.derived.omega_meas;
        let v_w = 0.5 * omega_tilde.norm_squared();
        let theta_err = rec.derived.theta_est - theta_true.theta();
        let r = scaling_factor(rec.derived.f_r, j_m);
        let z = theta_err / r;
        let v_z = z.norm_squared() / (2.0 * gains.gamma);
        out.push(LyapunovSample {
            t: rec.t,
            v_q,
            v_s,
            v_w,
            v_z,
            v_total: v_q + v_s + v_w + eta_val * v_z,
        });
    }
    Ok(out)
}

/// Least-squares exponential envelope of a positive series.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeFit {
    /// Slope of `ln V` versus time (1/s); negative means decay.
    pub rate: f64,
    /// Coefficient of determination of the linear fit.
    pub r_squared: f64,
}

/// Fit `ln v = c + rate * t` over the samples; entries with `v < 1e-300` are
/// dropped. Requires at least 100 surviving samples.
pub fn exponential_envelope_fit(t: &[f64], v: &[f64]) -> Result<EnvelopeFit> {
    assert_eq!(t.len(), v.len());
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(v.iter())
        .filter(|(_, &vi)| vi >= 1e-300)
        .map(|(&ti, &vi)| (ti, vi.ln()))
        .collect();
    if pts.len() < 100 {
        return Err(Error::EmptyWindow);
    }
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut s_tt = 0.0;
    let mut s_ty = 0.0;
    let mut s_yy = 0.0;
    for (ti, yi) in &pts {
        s_tt += (ti - mean_t) * (ti - mean_t);
        s_ty += (ti - mean_t) * (yi - mean_y);
        s_yy += (yi - mean_y) * (yi - mean_y);
    }
    let rate = s_ty / s_tt;
    let ss_res = s_yy - rate * s_ty;
    let r_squared = if s_yy < 1e-30 { 1.0 } else { 1.0 - ss_res / s_yy };
    Ok(EnvelopeFit { rate, r_squared })
}

/// Settling-duration bounds, measured from the excitation onset `T_s`.
#[derive(Debug, Clone, Copy)]
pub struct SettlingBounds {
    /// Finite-time bound; `None` when the sub-unity power gain is zero.
    pub finite: Option<f64>,
    /// Fixed-time bound; `None` unless both power gains are positive.
    pub fixed: Option<f64>,
}

/// Evaluate the settling bounds for the power-term adaptation:
/// with `c_i = (2 gamma)^{(iota_i+1)/2} lambda_i hbar^{iota_i} R_m^{iota_i-1}`,
/// finite: `ln[(2 lambda gamma hbar V_z(T_s)^{(1-iota1)/2} + c1)/c1]
///          / (lambda gamma hbar (1-iota1))`;
/// fixed:  `2/(c1 (1-iota1)) + 2/(c2 (iota2-1))`.
pub fn settling_bounds(
    gains: &ControllerGains,
    lambda1: f64,
    lambda2: f64,
    hbar: f64,
    v_z_at_ts: f64,
    r_m: f64,
) -> SettlingBounds {
    let g2 = 2.0 * gains.gamma;
    let c1 = g2.powf((gains.iota1 + 1.0) / 2.0)
        * lambda1
        * hbar.powf(gains.iota1)
        * r_m.powf(gains.iota1 - 1.0);
    let c2 = g2.powf((gains.iota2 + 1.0) / 2.0)
        * lambda2
        * hbar.powf(gains.iota2)
        * r_m.powf(gains.iota2 - 1.0);
    let finite = (c1 > 0.0 && hbar > 0.0).then(|| {
        let lgh = gains.lambda * gains.gamma * hbar;
        ((2.0 * lgh * v_z_at_ts.powf((1.0 - gains.iota1) / 2.0) + c1) / c1).ln()
            / (lgh * (1.0 - gains.iota1))
    });
    let fixed = (c1 > 0.0 && c2 > 0.0)
        .then(|| 2.0 / (c1 * (1.0 - gains.iota1)) + 2.0 / (c2 * (gains.iota2 - 1.0)));
    SettlingBounds { finite, fixed }
}

/// Scalar summary of one run over an evaluation window.
///
/// The RMS channels are computed from the tracking errors as the controller
/// observes them (noise included), which is what a steady-state accuracy
/// table reports; the anti-unwinding floor `min_abs_qe4` uses the true error.
#[derive(Debug, Clone, Copy)]
pub struct RunMetrics {
    /// Max across components of the per-component RMS of `q_ev`.
    pub rms_qev: f64,
    /// Same for the rate error (rad/s).
    pub rms_omega_e: f64,
    /// Same for the parameter error (kg m^2).
    pub rms_theta_err: f64,
    /// Smallest |q_e4| over the window.
    pub min_abs_qe4: f64,
    /// Detected excitation onset over the whole log, if any.
    pub t_s_detected: Option<f64>,
    /// Empirical regressor floor after the onset.
    pub hbar: Option<f64>,
    /// Largest relative variation of any parameter-error ratio over the
    /// window; small values mean synchronized convergence.
    pub sync_ratio_spread: Option<f64>,
}

fn rms_max(samples: &[Vec6], dims: usize) -> f64 {
    let n = samples.len() as f64;
    let mut worst: f64 = 0.0;
    for i in 0..dims {
        let ms = samples.iter().map(|v| v[i] * v[i]).sum::<f64>() / n;
        worst = worst.max(ms.sqrt());
    }
    worst
}

/// Compute windowed RMS metrics, the excitation onset and the synchronization
/// spread for a logged run.
pub fn metrics(log: &TrajectoryLog, t_start: f64, t_end: f64) -> Result<RunMetrics> {
    if t_end <= t_start {
        return Err(Error::EmptyWindow);
    }
    let window: Vec<_> = log
        .records
        .iter()
        .filter(|r| r.t >= t_start && r.t <= t_end)
        .collect();
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }

    let qev: Vec<Vec6> = window
        .iter()
        .map(|r| {
            let mut v = Vec6::zeros();
            v[0] = r.derived.q_e_meas[0];
            v[1] = r.derived.q_e_meas[1];
            v[2] = r.derived.q_e_meas[2];
            v
        })
        .collect();
    let omega_e: Vec<Vec6> = window
        .iter()
        .map(|r| {
            let mut v = Vec6::zeros();
            for i in 0..3 {
                v[i] = r.derived.omega_e_meas[i];
            }
            v
        })
        .collect();
    let theta_err: Vec<Vec6> = window.iter().map(|r| r.derived.theta_err).collect();

    let min_abs_qe4 = window
        .iter()
        .map(|r| r.derived.q_e[3].abs())
        .fold(f64::INFINITY, f64::min);

    let times: Vec<f64> = log.records.iter().map(|r| r.t).collect();
    let delta_n: Vec<f64> = log.records.iter().map(|r| r.derived.delta_n).collect();
    let floor = pe_floor_monitor(&times, &delta_n, log.scenario.diagnostics.eps_pe);

    Ok(RunMetrics {
        rms_qev: rms_max(&qev, 3),
        rms_omega_e: rms_max(&omega_e, 3),
        rms_theta_err: rms_max(&theta_err, 6),
        min_abs_qe4,
        t_s_detected: floor.map(|f: PeFloor| f.t_s),
        hbar: floor.map(|f| f.hbar),
        sync_ratio_spread: sync_ratio_spread(&theta_err),
    })
}

/// Max over component pairs of the relative variation of
/// `theta_err_i / theta_err_j`; samples where either component is below 1e-6
/// in magnitude are excluded.
fn sync_ratio_spread(theta_err: &[Vec6]) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for i in 0..6 {
        for j in 0..6 {
            if i == j {
                continue;
            }
            let ratios: Vec<f64> = theta_err
                .iter()
                .filter(|v| v[i].abs() > 1e-6 && v[j].abs() > 1e-6)
                .map(|v| v[i] / v[j])
                .collect();
            if ratios.len() < 2 {
                continue;
            }
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sorted = ratios.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = sorted[sorted.len() / 2].abs().max(1e-12);
            let spread = (hi - lo) / median;
            worst = Some(worst.map_or(spread, |w: f64| w.max(spread)));
        }
    }
    worst
}
