//! Fixed-step RK4 integration of the full closed loop.
//!
//! Plant, reference kinematics, rate filter, estimator and all identification
//! filters are integrated as one augmented state vector. Feedback is evaluated
//! inside every Runge-Kutta stage (no sample-and-hold); when measurement noise
//! is enabled, one realization is drawn per step and held across the four
//! stages so the stage dynamics stay smooth. Both quaternions are renormalized
//! after each step.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attmath::{
    kinematics_matrix, scalar_rate, InertiaParams, Mat6, UnitQuaternion, Vec3, Vec6,
};
use crate::controller::{
    ce_baseline_adaptation, control_torque, power_term, prediction_error, theta_hat_derivative,
    ControllerGains, EstimatorVariant,
};
use crate::diagnostics;
use crate::drem::{drem_derivative, scalar_lre, DremState};
use crate::errstate::{lambda_from_initial, make_tracking_error};
use crate::plant::{
    apply_noise, disturbance_at, BodyState, NoiseConfig, NoiseSample, Plant, ReferenceProfile,
    ReferenceState,
};
use crate::regressor::{
    build_regressors, mu, mu_bar_dot, omega_hat_derivative, BodyFrameReference, MuBarDotInputs,
};
use crate::{Error, Result};

/// Number of scalars in the augmented state: q (4), omega (3), q_r (4),
/// omega_hat (3), theta_hat (6), omega_f (3), W_f (18), u_f (3), M (6),
/// N packed symmetric (21), chi (6), Xi (1), plus the scaling surrogate
/// tanh(r) (1) carried for diagnostics only.
pub const STATE_DIM: usize = 79;

/// The full closed-loop state.
#[derive(Debug, Clone, Copy)]
pub struct AugmentedState {
    pub q_v: Vec3,
    pub q_w: f64,
    pub omega: Vec3,
    pub q_r_v: Vec3,
    pub q_r_w: f64,
    pub omega_hat: Vec3,
    pub theta_hat: Vec6,
    pub drem: DremState,
    /// tanh of the dynamic-scaling state r; read only by diagnostics.
    pub r_tanh: f64,
}

impl AugmentedState {
    pub fn q(&self) -> UnitQuaternion {
        UnitQuaternion::from_raw_unchecked(self.q_v, self.q_w)
    }

    pub fn q_r(&self) -> UnitQuaternion {
        UnitQuaternion::from_raw_unchecked(self.q_r_v, self.q_r_w)
    }

    pub fn pack(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        let mut k = 0;
        let push = |v: f64, out: &mut [f64; STATE_DIM], k: &mut usize| {
            out[*k] = v;
            *k += 1;
        };
        for i in 0..3 {
            push(self.q_v[i], &mut out, &mut k);
        }
        push(self.q_w, &mut out, &mut k);
        for i in 0..3 {
            push(self.omega[i], &mut out, &mut k);
        }
        for i in 0..3 {
            push(self.q_r_v[i], &mut out, &mut k);
        }
        push(self.q_r_w, &mut out, &mut k);
        for i in 0..3 {
            push(self.omega_hat[i], &mut out, &mut k);
        }
        for i in 0..6 {
            push(self.theta_hat[i], &mut out, &mut k);
        }
        for i in 0..3 {
            push(self.drem.omega_f[i], &mut out, &mut k);
        }
        for r in 0..3 {
            for c in 0..6 {
                push(self.drem.w_f[(r, c)], &mut out, &mut k);
            }
        }
        for i in 0..3 {
            push(self.drem.u_f[i], &mut out, &mut k);
        }
        for i in 0..6 {
            push(self.drem.m[i], &mut out, &mut k);
        }
        for r in 0..6 {
            for c in r..6 {
                push(self.drem.n[(r, c)], &mut out, &mut k);
            }
        }
        for i in 0..6 {
            push(self.drem.chi[i], &mut out, &mut k);
        }
        push(self.drem.xi, &mut out, &mut k);
        push(self.r_tanh, &mut out, &mut k);
        debug_assert_eq!(k, STATE_DIM);
        out
    }

    pub fn unpack(x: &[f64; STATE_DIM]) -> Self {
        let mut k = 0;
        let next = |x: &[f64; STATE_DIM], k: &mut usize| {
            let v = x[*k];
            *k += 1;
            v
        };
        let q_v = Vec3::new(next(x, &mut k), next(x, &mut k), next(x, &mut k));
        let q_w = next(x, &mut k);
        let omega = Vec3::new(next(x, &mut k), next(x, &mut k), next(x, &mut k));
        let q_r_v = Vec3::new(next(x, &mut k), next(x, &mut k), next(x, &mut k));
        let q_r_w = next(x, &mut k);
        let omega_hat = Vec3::new(next(x, &mut k), next(x, &mut k), next(x, &mut k));
        let theta_hat = Vec6::from_fn(|_, _| next(x, &mut k));
        let omega_f = Vec3::new(next(x, &mut k), next(x, &mut k), next(x, &mut k));
        let mut w_f = crate::attmath::Mat3x6::zeros();
        for r in 0..3 {
            for c in 0..6 {
                w_f[(r, c)] = next(x, &mut k);
            }
        }
        let u_f = Vec3::new(next(x, &mut k), next(x, &mut k), next(x, &mut k));
        let m = Vec6::from_fn(|_, _| next(x, &mut k));
        let mut n = Mat6::zeros();
        for r in 0..6 {
            for c in r..6 {
                let v = next(x, &mut k);
                n[(r, c)] = v;
                n[(c, r)] = v;
            }
        }
        let chi = Vec6::from_fn(|_, _| next(x, &mut k));
        let xi = next(x, &mut k);
        let r_tanh = next(x, &mut k);
        debug_assert_eq!(k, STATE_DIM);
        Self {
            q_v,
            q_w,
            omega,
            q_r_v,
            q_r_w,
            omega_hat,
            theta_hat,
            drem: DremState { omega_f, w_f, u_f, m, n, chi, xi },
            r_tanh,
        }
    }
}

/// Human-readable name of a packed state slot, for non-finite diagnostics.
fn state_channel_name(idx: usize) -> String {
    const GROUPS: &[(&str, usize)] = &[
        ("q", 4),
        ("omega", 3),
        ("q_r", 4),
        ("omega_hat", 3),
        ("theta_hat", 6),
        ("omega_f", 3),
        ("W_f", 18),
        ("u_f", 3),
        ("M", 6),
        ("N", 21),
        ("chi", 6),
        ("Xi", 1),
        ("r_tanh", 1),
    ];
    let mut base = 0;
    for (name, len) in GROUPS {
        if idx < base + len {
            return format!("{}[{}]", name, idx - base);
        }
        base += len;
    }
    format!("state[{idx}]")
}

fn default_step() -> f64 {
    0.01
}

/// Initial body state. The scalar part of the attitude is
/// `sign * sqrt(1 - |q_vec|^2)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConditions {
    pub q_vec: [f64; 3],
    #[serde(default = "default_sign")]
    pub q_scalar_sign: f64,
    #[serde(default)]
    pub omega: [f64; 3],
}

fn default_sign() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub variant: EstimatorVariant,
    pub theta_hat0: [f64; 6],
    #[serde(default)]
    pub chi0: [f64; 6],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub theta_true: [f64; 6],
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceConfig {
    pub enabled: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Analysis slack constant rho > 0 entering eta.
    pub rho: f64,
    /// Initial scaling state r(0) > 0.
    pub r0: f64,
    /// Excitation-floor detection threshold.
    pub eps_pe: f64,
    /// When false, Lyapunov channels are logged as zero; the control and
    /// plant channels are unaffected by construction.
    pub enabled: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { rho: 1.0, r0: 0.1, eps_pe: 1e-4, enabled: true }
    }
}

/// A complete, reproducible run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub label: String,
    /// Simulated time span, s.
    pub duration: f64,
    /// Fixed integrator step, s.
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub seed: u64,
    pub initial: InitialConditions,
    pub gains: ControllerGains,
    pub estimator: EstimatorConfig,
    pub plant: PlantConfig,
    #[serde(default)]
    pub disturbance: DisturbanceConfig,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub reference: ReferenceProfile,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

const CASE_Q0: [f64; 3] = [0.33, -0.3, -0.62];
const THETA_TRUE: [f64; 6] = [20.0, 17.0, 15.0, 1.4, 0.9, 1.2];
const THETA_HAT0: [f64; 6] = [10.0, 30.0, 8.0, 0.0, 0.0, 0.0];

impl Scenario {
    fn base(label: &str) -> Self {
        Self {
            label: label.to_string(),
            duration: 40.0,
            step: 0.01,
            seed: 0,
            initial: InitialConditions { q_vec: CASE_Q0, q_scalar_sign: 1.0, omega: [0.0; 3] },
            gains: ControllerGains::nominal(),
            estimator: EstimatorConfig {
                variant: EstimatorVariant::Exponential,
                theta_hat0: THETA_HAT0,
                chi0: [0.0; 6],
            },
            plant: PlantConfig { theta_true: THETA_TRUE },
            disturbance: DisturbanceConfig::default(),
            noise: None,
            reference: ReferenceProfile::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }

    /// Nominal run with the initial attitude on the positive hemisphere.
    pub fn nominal_case1() -> Self {
        Self::base("nominal_case1")
    }

    /// Same physical initial orientation, antipodal quaternion: q_e4(0) < 0.
    pub fn nominal_case2() -> Self {
        let mut s = Self::base("nominal_case2");
        s.initial.q_vec = [-CASE_Q0[0], -CASE_Q0[1], -CASE_Q0[2]];
        s.initial.q_scalar_sign = -1.0;
        s
    }

    /// Finite-time adaptation extension.
    pub fn finite_time() -> Self {
        let mut s = Self::base("finite_time");
        s.estimator.variant = EstimatorVariant::FiniteTime;
        s.gains.lambda1 = 0.01;
        s.gains.lambda2 = 0.0;
        s
    }

    /// Fixed-time adaptation extension.
    pub fn fixed_time() -> Self {
        let mut s = Self::base("fixed_time");
        s.estimator.variant = EstimatorVariant::FixedTime;
        s.gains.lambda1 = 0.01;
        s.gains.lambda2 = 0.01;
        s
    }

    /// Disturbance and measurement noise on, long window for steady-state
    /// statistics.
    pub fn perturbed_case2() -> Self {
        let mut s = Self::nominal_case2();
        s.label = "perturbed_case2".to_string();
        s.duration = 100.0;
        s.seed = 42;
        s.disturbance.enabled = true;
        s.noise = Some(NoiseConfig { cone_half_angle_deg: 0.1, gyro_std: 1e-3, seed: None });
        s
    }

    /// Certainty-equivalence baseline under the same perturbed conditions.
    pub fn perturbed_ce_baseline() -> Self {
        let mut s = Self::perturbed_case2();
        s.label = "perturbed_ce_baseline".to_string();
        s.estimator.variant = EstimatorVariant::CeBaseline;
        s
    }

    /// Excitation artificially cut at t = 8 s by freezing the reference rate.
    pub fn excitation_cutoff() -> Self {
        let mut s = Self::base("excitation_cutoff");
        s.reference.excitation_cutoff = Some(8.0);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(Error::Config(format!(
                "duration must be non-negative, got {}",
                self.duration
            )));
        }
        self.gains.validate()?;
        if let Some(noise) = &self.noise {
            noise.validate()?;
        }
        if !(self.diagnostics.rho > 0.0 && self.diagnostics.r0 > 0.0) {
            return Err(Error::Config("diagnostics rho and r0 must be positive".into()));
        }
        if self.diagnostics.eps_pe <= 0.0 {
            return Err(Error::Config("eps_pe must be positive".into()));
        }
        let qv = Vec3::from_row_slice(&self.initial.q_vec);
        if qv.norm_squared() > 1.0 {
            return Err(Error::Config(
                "initial attitude vector part has norm greater than one".into(),
            ));
        }
        InertiaParams::new(Vec6::from_row_slice(&self.plant.theta_true))?;
        Ok(())
    }

    /// Number of integrator steps.
    pub fn n_steps(&self) -> usize {
        (self.duration / self.step).round() as usize
    }
}

/// Per-sample derived channels captured alongside the raw state.
#[derive(Debug, Clone, Copy)]
pub struct Derived {
    pub q_meas: [f64; 4],
    pub omega_meas: Vec3,
    pub omega_r: Vec3,
    /// True attitude tracking error (simulation-side).
    pub q_e: [f64; 4],
    pub omega_e: Vec3,
    pub s: Vec3,
    /// Tracking error as the controller sees it (noise included).
    pub q_e_meas: [f64; 4],
    pub omega_e_meas: Vec3,
    pub s_meas: Vec3,
    pub u: Vec3,
    pub zeta: Vec6,
    pub theta_est: Vec6,
    pub theta_err: Vec6,
    pub eps: Vec6,
    pub delta: f64,
    pub delta_n: f64,
    pub v_q: f64,
    pub v_z: f64,
    pub v_total: f64,
    pub phi_theta_err_norm: f64,
    pub psi_norm: f64,
    pub f_r: f64,
}

/// One logged sample.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub t: f64,
    pub state: AugmentedState,
    pub derived: Derived,
}

/// A completed run: the scenario that produced it, one record per step plus
/// the initial sample, and any runtime warnings.
#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub scenario: Scenario,
    pub records: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

const CSV_HEADER: &str = "t[s],q_1,q_2,q_3,q_4,omega_1[rad/s],omega_2[rad/s],omega_3[rad/s],\
q_meas_1,q_meas_2,q_meas_3,q_meas_4,omega_meas_1[rad/s],omega_meas_2[rad/s],omega_meas_3[rad/s],\
q_r_1,q_r_2,q_r_3,q_r_4,omega_r_1[rad/s],omega_r_2[rad/s],omega_r_3[rad/s],\
q_e_1,q_e_2,q_e_3,q_e_4,omega_e_1[rad/s],omega_e_2[rad/s],omega_e_3[rad/s],\
s_1[rad/s],s_2[rad/s],s_3[rad/s],\
q_e_meas_1,q_e_meas_2,q_e_meas_3,q_e_meas_4,\
omega_e_meas_1[rad/s],omega_e_meas_2[rad/s],omega_e_meas_3[rad/s],\
s_meas_1[rad/s],s_meas_2[rad/s],s_meas_3[rad/s],u_1[N*m],u_2[N*m],u_3[N*m],\
omega_hat_1[rad/s],omega_hat_2[rad/s],omega_hat_3[rad/s],\
theta_hat_1[kg*m^2],theta_hat_2[kg*m^2],theta_hat_3[kg*m^2],theta_hat_4[kg*m^2],theta_hat_5[kg*m^2],theta_hat_6[kg*m^2],\
zeta_1[kg*m^2],zeta_2[kg*m^2],zeta_3[kg*m^2],zeta_4[kg*m^2],zeta_5[kg*m^2],zeta_6[kg*m^2],\
theta_est_1[kg*m^2],theta_est_2[kg*m^2],theta_est_3[kg*m^2],theta_est_4[kg*m^2],theta_est_5[kg*m^2],theta_est_6[kg*m^2],\
theta_err_1[kg*m^2],theta_err_2[kg*m^2],theta_err_3[kg*m^2],theta_err_4[kg*m^2],theta_err_5[kg*m^2],theta_err_6[kg*m^2],\
eps_1,eps_2,eps_3,eps_4,eps_5,eps_6,chi_1,chi_2,chi_3,chi_4,chi_5,chi_6,\
delta,delta_n,xi,v_q,v_z,v_total,phi_theta_err_norm,psi_norm,f_r";

impl TrajectoryLog {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    /// Serialize to CSV: the given comment lines (prefixed `#`), one header
    /// row naming every channel with units, one row per sample, floats with
    /// 17 significant digits.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W, comments: &[String]) -> Result<()> {
        for line in comments {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "{CSV_HEADER}")?;
        let mut row: Vec<f64> = Vec::with_capacity(96);
        for rec in &self.records {
            row.clear();
            let d = &rec.derived;
            let st = &rec.state;
            row.push(rec.t);
            row.extend_from_slice(&[st.q_v[0], st.q_v[1], st.q_v[2], st.q_w]);
            row.extend(st.omega.iter());
            row.extend_from_slice(&d.q_meas);
            row.extend(d.omega_meas.iter());
            row.extend_from_slice(&[st.q_r_v[0], st.q_r_v[1], st.q_r_v[2], st.q_r_w]);
            row.extend(d.omega_r.iter());
            row.extend_from_slice(&d.q_e);
            row.extend(d.omega_e.iter());
            row.extend(d.s.iter());
            row.extend_from_slice(&d.q_e_meas);
            row.extend(d.omega_e_meas.iter());
            row.extend(d.s_meas.iter());
            row.extend(d.u.iter());
            row.extend(st.omega_hat.iter());
            row.extend(st.theta_hat.iter());
            row.extend(d.zeta.iter());
            row.extend(d.theta_est.iter());
            row.extend(d.theta_err.iter());
            row.extend(d.eps.iter());
            row.extend(st.drem.chi.iter());
            row.extend_from_slice(&[
                d.delta,
                d.delta_n,
                st.drem.xi,
                d.v_q,
                d.v_z,
                d.v_total,
                d.phi_theta_err_norm,
                d.psi_norm,
                d.f_r,
            ]);
            let mut line = String::with_capacity(row.len() * 25);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&format!("{v:.16e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Resolved, validated run context.
struct Context {
    scenario: Scenario,
    plant: Plant,
    theta_true: Vec6,
    j_m: f64,
    lambda: f64,
    chi0: Vec6,
    power_gains: (f64, f64),
    eta: f64,
}

/// Classical 4-stage Runge-Kutta step over a fixed-size state array.
pub fn rk4_step<const D: usize, F>(y: &[f64; D], t: f64, h: f64, mut f: F) -> Result<[f64; D]>
where
    F: FnMut(f64, &[f64; D]) -> Result<[f64; D]>,
{
    let k1 = f(t, y)?;
    let mut stage = [0.0; D];
    for i in 0..D {
        stage[i] = y[i] + 0.5 * h * k1[i];
    }
    let k2 = f(t + 0.5 * h, &stage)?;
    for i in 0..D {
        stage[i] = y[i] + 0.5 * h * k2[i];
    }
    let k3 = f(t + 0.5 * h, &stage)?;
    for i in 0..D {
        stage[i] = y[i] + h * k3[i];
    }
    let k4 = f(t + h, &stage)?;
    let mut out = [0.0; D];
    for i in 0..D {
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

/// Evaluate the closed-loop derivative and the derived channels at one
/// instant. The measurement-noise sample, when present, is held fixed by the
/// caller across the stages of a step.
fn eval(
    ctx: &Context,
    t: f64,
    state: &AugmentedState,
    noise: Option<&NoiseSample>,
) -> Result<(AugmentedState, Derived)> {
    // A diverging loop (for instance an over-amplified mixing gain driving the
    // extension filter unstable) must abort with a named channel, not
    // propagate NaN into the downstream decompositions.
    for (idx, v) in state.pack().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { t, channel: state_channel_name(idx) });
        }
    }
    let gains = &ctx.scenario.gains;
    let k_p = gains.k_p();
    let k_f = gains.k_f();

    let body_true = BodyState { q: state.q(), omega: state.omega };
    let measured = match noise {
        Some(sample) => apply_noise(&body_true, sample),
        None => body_true,
    };

    let (omega_r, omega_r_dot, omega_r_ddot) = ctx.scenario.reference.rates_at(t);
    let reference = ReferenceState { q_r: state.q_r(), omega_r, omega_r_dot, omega_r_ddot };

    // The barrier design claims |q_e4| never collapses and its sign never
    // leaves the hemisphere fixed at t = 0. Either event falsifies the
    // invariant-set argument and must abort, not continue silently.
    let err = make_tracking_error(&measured, &reference, ctx.lambda);
    let err_true = make_tracking_error(&body_true, &reference, ctx.lambda);
    for e in [&err, &err_true] {
        let q_e4 = e.q_e.scalar();
        if q_e4.abs() < 1e-6 || q_e4.signum() != ctx.lambda.signum() {
            return Err(Error::UnwindingGuard { t, value: q_e4.abs() });
        }
    }

    let frames = BodyFrameReference::new(&err.q_e, &reference);
    let bundle = build_regressors(&measured.omega, &err, &frames, &state.omega_hat, k_p)?;

    let lre = scalar_lre(&state.drem, &ctx.chi0, gains.k_i, gains.k_n);

    let is_ce = ctx.scenario.estimator.variant == EstimatorVariant::CeBaseline;
    let (zeta, theta_est) = if is_ce {
        (Vec6::zeros(), state.theta_hat)
    } else {
        let mu_val = mu(
            &measured.omega,
            &state.omega_hat,
            &bundle.y,
            &frames.omega_r_body,
            &err.q_e,
            ctx.lambda,
            k_p,
        );
        let zeta = gains.gamma * mu_val;
        (zeta, state.theta_hat + zeta)
    };

    let eps = prediction_error(&theta_est, &lre);
    let u = control_torque(&bundle.phi, &theta_est);

    let omega_hat_dot =
        omega_hat_derivative(&state.omega_hat, &bundle.y_bar, &measured.omega, k_f);

    let theta_hat_dot = if is_ce {
        ce_baseline_adaptation(&bundle.phi, &err.s, gains.gamma_ce)
    } else {
        let mbd = mu_bar_dot(&MuBarDotInputs {
            omega: measured.omega,
            omega_hat: state.omega_hat,
            omega_hat_dot,
            q_e: err.q_e,
            omega_e: err.omega_e,
            omega_r_body: frames.omega_r_body,
            omega_r_dot_body: frames.omega_r_dot_body,
            c: frames.c,
            omega_r_dot,
            omega_r_ddot,
            k_p,
            lambda: ctx.lambda,
        })?;
        let (l1, l2) = ctx.power_gains;
        let power = power_term(&eps, l1, l2, gains.iota1, gains.iota2);
        theta_hat_derivative(&bundle, &mbd, &eps, gains.gamma, gains.lambda, &power)
    };

    let u_d = if ctx.scenario.disturbance.enabled { disturbance_at(t) } else { Vec3::zeros() };
    let plant_dot = ctx.plant.derivative(&body_true, &u, &u_d);

    let q_r_v_dot = kinematics_matrix(&reference.q_r) * omega_r;
    let q_r_w_dot = scalar_rate(&reference.q_r, &omega_r);

    let mut drem_dot = drem_derivative(
        &state.drem,
        &measured.omega,
        &u,
        gains.a,
        gains.b,
        lre.delta,
        &lre.y,
    );
    if is_ce {
        // The baseline never consumes the prediction error, and its looser
        // transients can push Delta high enough to make the chi/Xi dynamics
        // stiff at the fixed step; hold those states instead.
        drem_dot.chi = Vec6::zeros();
        drem_dot.xi = 0.0;
    }

    if !bundle.psi.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { t, channel: "Psi".into() });
    }
    let psi_norm = diagnostics::spectral_norm(&bundle.psi);
    let r_tanh_dot =
        diagnostics::r_tanh_derivative(state.r_tanh, psi_norm * psi_norm, gains.gamma, gains.f_m);

    let derivative = AugmentedState {
        q_v: kinematics_matrix(&body_true.q) * body_true.omega,
        q_w: scalar_rate(&body_true.q, &body_true.omega),
        omega: plant_dot.omega_dot,
        q_r_v: q_r_v_dot,
        q_r_w: q_r_w_dot,
        omega_hat: omega_hat_dot,
        theta_hat: theta_hat_dot,
        drem: drem_dot,
        r_tanh: r_tanh_dot,
    };
    for (idx, v) in derivative.pack().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { t, channel: format!("d/dt {}", state_channel_name(idx)) });
        }
    }

    let theta_err = theta_est - ctx.theta_true;
    let f_r = diagnostics::f_from_tanh(state.r_tanh, gains.f_m);
    let (v_q, v_z, v_total) = if ctx.scenario.diagnostics.enabled {
        let v_q = crate::errstate::barrier_value(&err_true.q_e, gains.alpha)?;
        let omega_tilde = state.omega_hat - measured.omega;
        let r_factor = diagnostics::scaling_factor(f_r, ctx.j_m);
        let z = theta_err / r_factor;
        let v_z = z.norm_squared() / (2.0 * gains.gamma);
        let v_total =
            v_q + 0.5 * err_true.s.norm_squared() + 0.5 * omega_tilde.norm_squared() + ctx.eta * v_z;
        (v_q, v_z, v_total)
    } else {
        (0.0, 0.0, 0.0)
    };

    let derived = Derived {
        q_meas: measured.q.as_array(),
        omega_meas: measured.omega,
        omega_r,
        q_e: err_true.q_e.as_array(),
        omega_e: err_true.omega_e,
        s: err_true.s,
        q_e_meas: err.q_e.as_array(),
        omega_e_meas: err.omega_e,
        s_meas: err.s,
        u,
        zeta,
        theta_est,
        theta_err,
        eps,
        delta: lre.delta,
        delta_n: lre.delta_n,
        v_q,
        v_z,
        v_total,
        phi_theta_err_norm: (bundle.phi * theta_err).norm(),
        psi_norm,
        f_r,
    };

    Ok((derivative, derived))
}

/// A scenario being integrated. Tests may adjust the initial state between
/// construction and `run`.
pub struct Simulation {
    ctx: Context,
    state: AugmentedState,
    t: f64,
    rng: Option<ChaCha12Rng>,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let theta_true_v = Vec6::from_row_slice(&scenario.plant.theta_true);
        let theta_true = InertiaParams::new(theta_true_v)?;
        let plant = Plant::new(theta_true)?;

        let q0 = UnitQuaternion::from_vector_and_sign(
            Vec3::from_row_slice(&scenario.initial.q_vec),
            scenario.initial.q_scalar_sign,
        )?;
        // q_r(0) is the identity, so q_e(0) = q(0); the slope is frozen here.
        let lambda = lambda_from_initial(q0.scalar(), scenario.gains.beta)?;

        let omega0 = Vec3::from_row_slice(&scenario.initial.omega);
        let chi0 = Vec6::from_row_slice(&scenario.estimator.chi0);
        let state = AugmentedState {
            q_v: q0.vector(),
            q_w: q0.scalar(),
            omega: omega0,
            q_r_v: Vec3::zeros(),
            q_r_w: 1.0,
            omega_hat: omega0,
            theta_hat: Vec6::from_row_slice(&scenario.estimator.theta_hat0),
            drem: DremState::initial(&omega0, scenario.gains.a, &chi0),
            r_tanh: scenario.diagnostics.r0.tanh(),
        };

        let rng = scenario.noise.as_ref().map(|n| {
            ChaCha12Rng::seed_from_u64(n.seed.unwrap_or(scenario.seed))
        });

        let ctx = Context {
            power_gains: scenario.estimator.variant.power_gains(&scenario.gains),
            eta: diagnostics::eta(scenario.gains.kappa, scenario.diagnostics.rho),
            j_m: theta_true.min_eigenvalue(),
            theta_true: theta_true_v,
            plant,
            lambda,
            chi0,
            scenario: scenario.clone(),
        };
        Ok(Self { ctx, state, t: 0.0, rng })
    }

    pub fn state(&self) -> &AugmentedState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut AugmentedState {
        &mut self.state
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Frozen filtered-error slope of this run.
    pub fn lambda_slope(&self) -> f64 {
        self.ctx.lambda
    }

    /// Evaluate the closed-loop derivative at the current state without
    /// advancing; noiseless view.
    pub fn derivative_now(&self) -> Result<(AugmentedState, Derived)> {
        eval(&self.ctx, self.t, &self.state, None)
    }

    /// Integrate to the end of the scenario, logging every step.
    pub fn run(mut self) -> Result<TrajectoryLog> {
        let h = self.ctx.scenario.step;
        let n_steps = self.ctx.scenario.n_steps();
        let mut records = Vec::with_capacity(n_steps + 1);
        let mut warnings = Vec::new();
        let mut min_pos_det = f64::INFINITY;

        let noise_cfg = self.ctx.scenario.noise;
        for k in 0..=n_steps {
            self.t = k as f64 * h;
            let sample = match (&noise_cfg, &mut self.rng) {
                (Some(cfg), Some(rng)) => Some(NoiseSample::draw(cfg, rng)),
                _ => None,
            };
            let (_, derived) = eval(&self.ctx, self.t, &self.state, sample.as_ref())?;
            records.push(StepRecord { t: self.t, state: self.state, derived });
            let det = derived.delta / self.ctx.scenario.gains.k_i;
            if det.abs() > 0.0 {
                min_pos_det = min_pos_det.min(det.abs());
            }
            if k == n_steps {
                break;
            }

            let packed = self.state.pack();
            let next = rk4_step(&packed, self.t, h, |tau, y| {
                let (deriv, _) = eval(&self.ctx, tau, &AugmentedState::unpack(y), sample.as_ref())?;
                Ok(deriv.pack())
            })?;
            for (idx, v) in next.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { t: self.t + h, channel: state_channel_name(idx) });
                }
            }
            let mut state = AugmentedState::unpack(&next);
            let q = UnitQuaternion::from_raw_normalized(state.q_v, state.q_w);
            state.q_v = q.vector();
            state.q_w = q.scalar();
            let q_r = UnitQuaternion::from_raw_normalized(state.q_r_v, state.q_r_w);
            state.q_r_v = q_r.vector();
            state.q_r_w = q_r.scalar();
            state.r_tanh = state.r_tanh.min(1.0);
            self.state = state;
        }

        let k_i = self.ctx.scenario.gains.k_i;
        if min_pos_det.is_finite() && min_pos_det < 1e-300 / k_i {
            warnings.push(format!(
                "det(N) reached {min_pos_det:.3e}; products with k_I = {k_i:.3e} may underflow"
            ));
        }
        Ok(TrajectoryLog { scenario: self.ctx.scenario.clone(), records, warnings })
    }
}

/// Build and run a scenario.
pub fn run_scenario(scenario: &Scenario) -> Result<TrajectoryLog> {
    Simulation::new(scenario)?.run()
}

/// Run several scenarios sequentially.
pub fn run_batch_sequential(scenarios: &[Scenario]) -> Vec<Result<TrajectoryLog>> {
    scenarios.iter().map(run_scenario).collect()
}

/// Run several scenarios, fanning out across the worker pool when the
/// `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn run_batch(scenarios: &[Scenario]) -> Vec<Result<TrajectoryLog>> {
    use rayon::prelude::*;
    scenarios.par_iter().map(run_scenario).collect()
}

/// Sequential fallback used when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn run_batch(scenarios: &[Scenario]) -> Vec<Result<TrajectoryLog>> {
    run_batch_sequential(scenarios)
}
