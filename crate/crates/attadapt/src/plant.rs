//! Rigid-body truth model, reference trajectory and perturbation models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attmath::{
    kinematics_matrix, scalar_rate, skew, InertiaParams, Mat3, UnitQuaternion, Vec3,
};
use crate::{Error, Result};

/// True state of the rigid body: inertial attitude and body angular velocity.
#[derive(Debug, Clone, Copy)]
pub struct BodyState {
    pub q: UnitQuaternion,
    pub omega: Vec3,
}

/// Reference trajectory sample with analytic derivatives up to second order.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceState {
    pub q_r: UnitQuaternion,
    pub omega_r: Vec3,
    pub omega_r_dot: Vec3,
    pub omega_r_ddot: Vec3,
}

/// Time derivative of a [`BodyState`]; the quaternion part is a raw rate.
#[derive(Debug, Clone, Copy)]
pub struct BodyStateDerivative {
    pub q_v_dot: Vec3,
    pub q_w_dot: f64,
    pub omega_dot: Vec3,
}

/// Reference angular-rate profile: the same scalar waveform on all three axes,
/// optionally frozen at a constant after `excitation_cutoff` to emulate the end
/// of excitation.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceProfile {
    pub excitation_cutoff: Option<f64>,
}

/// Scalar rate waveform and its first two time derivatives.
///
/// g(t) = 0.3 (1 - E) cos t + t E (0.08 pi + 0.006 sin t), E = exp(-0.01 t^2).
fn rate_waveform(t: f64) -> (f64, f64, f64) {
    let e = (-0.01 * t * t).exp();
    let (sin_t, cos_t) = t.sin_cos();
    let p = 0.08 * std::f64::consts::PI + 0.006 * sin_t;
    let p_dot = 0.006 * cos_t;
    let p_ddot = -0.006 * sin_t;

    let g = 0.3 * (1.0 - e) * cos_t + t * e * p;

    // d/dt E = -0.02 t E
    let a_dot = 0.3 * (0.02 * t * e * cos_t - (1.0 - e) * sin_t);
    let b_dot = e * (1.0 - 0.02 * t * t) * p + t * e * p_dot;
    let g_dot = a_dot + b_dot;

    let a_ddot = 0.3
        * ((0.02 * e - 0.0004 * t * t * e - 1.0 + e) * cos_t - 0.04 * t * e * sin_t);
    let b_ddot = e
        * (p * (-0.02 * t * (1.0 - 0.02 * t * t) - 0.04 * t)
            + 2.0 * p_dot * (1.0 - 0.02 * t * t)
            + t * p_ddot);
    let g_ddot = a_ddot + b_ddot;

    (g, g_dot, g_ddot)
}

impl ReferenceProfile {
    /// Reference angular velocity and its first two derivatives at time `t`.
    ///
    /// The reference attitude itself has no closed form; the simulator
    /// integrates its kinematics alongside the plant.
    pub fn rates_at(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let ones = Vec3::new(1.0, 1.0, 1.0);
        match self.excitation_cutoff {
            Some(cutoff) if t >= cutoff => {
                let (g, _, _) = rate_waveform(cutoff);
                (g * ones, Vec3::zeros(), Vec3::zeros())
            }
            _ => {
                let (g, g_dot, g_ddot) = rate_waveform(t);
                (g * ones, g_dot * ones, g_ddot * ones)
            }
        }
    }
}

/// Sinusoidal disturbance torque (N m).
pub fn disturbance_at(t: f64) -> Vec3 {
    1e-4 * Vec3::new(
        3.0 * (0.2 * t).cos() + 4.0 * (0.06 * t).sin() - 10.0,
        -1.5 * (0.04 * t).sin() + 3.0 * (0.1 * t).cos() + 15.0,
        3.0 * (0.2 * t).sin() - 8.0 * (0.08 * t).sin() + 5.0,
    )
}

/// Rigid body with a validated, cached inertia matrix.
#[derive(Debug, Clone)]
pub struct Plant {
    theta: InertiaParams,
    j: Mat3,
    j_inv: Mat3,
}

impl Plant {
    pub fn new(theta: InertiaParams) -> Result<Self> {
        let cond = theta.condition_number();
        if !(cond.is_finite() && cond <= 1e12) {
            return Err(Error::SingularInertia { cond });
        }
        let j = theta.matrix();
        let j_inv = j
            .try_inverse()
            .ok_or(Error::SingularInertia { cond })?;
        Ok(Self { theta, j, j_inv })
    }

    pub fn theta(&self) -> InertiaParams {
        self.theta
    }

    pub fn inertia(&self) -> Mat3 {
        self.j
    }

    pub fn inertia_inverse(&self) -> Mat3 {
        self.j_inv
    }

    /// Open-loop dynamics: quaternion kinematics plus
    /// `J omega_dot = -S(omega) J omega + u + u_d`.
    pub fn derivative(&self, state: &BodyState, u: &Vec3, u_d: &Vec3) -> BodyStateDerivative {
        let q_v_dot = kinematics_matrix(&state.q) * state.omega;
        let q_w_dot = scalar_rate(&state.q, &state.omega);
        let torque = -skew(&state.omega) * (self.j * state.omega) + u + u_d;
        BodyStateDerivative { q_v_dot, q_w_dot, omega_dot: self.j_inv * torque }
    }
}

/// One-shot plant derivative for callers that do not hold a [`Plant`].
pub fn plant_derivative(
    state: &BodyState,
    u: &Vec3,
    u_d: &Vec3,
    theta: &InertiaParams,
) -> Result<BodyStateDerivative> {
    Ok(Plant::new(*theta)?.derivative(state, u, u_d))
}

/// Measurement-noise model: eigenaxis perturbed uniformly within a spherical
/// cone, plus per-axis Gaussian gyro noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Cone half-angle around the true eigenaxis, degrees.
    pub cone_half_angle_deg: f64,
    /// Standard deviation of the per-axis rate noise, rad/s.
    pub gyro_std: f64,
    /// Optional dedicated stream seed; the scenario seed is used when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cone_half_angle_deg < 0.0 || self.gyro_std < 0.0 {
            return Err(Error::Config(
                "noise parameters must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One realization of the per-step measurement noise. Holding the sample
/// fixed across the Runge-Kutta stages keeps the stage dynamics smooth.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSample {
    /// Azimuth of the perturbed axis in the tangent frame of the true axis.
    pub axis_azimuth: f64,
    /// Cosine of the polar offset, drawn uniformly from [cos(half-angle), 1].
    pub axis_cos_polar: f64,
    /// Additive rate noise, rad/s.
    pub gyro: Vec3,
}

impl NoiseSample {
    /// Draw one sample. Azimuth is uniform on [0, 2 pi); the polar angle has
    /// density proportional to sin(phi) truncated to the cone, i.e. the
    /// perturbed axis is uniform over the spherical cap.
    pub fn draw(config: &NoiseConfig, rng: &mut impl Rng) -> Self {
        let half_angle = config.cone_half_angle_deg.to_radians();
        let cos_min = half_angle.cos();
        let axis_azimuth = rng.random_range(0.0..std::f64::consts::TAU);
        let axis_cos_polar = if half_angle == 0.0 {
            1.0
        } else {
            rng.random_range(cos_min..=1.0)
        };
        let normal = rand_distr::Normal::new(0.0, config.gyro_std.max(0.0))
            .expect("validated gyro_std");
        let gyro = Vec3::new(rng.sample(normal), rng.sample(normal), rng.sample(normal));
        Self { axis_azimuth, axis_cos_polar, gyro }
    }

    /// Identity sample (no perturbation).
    pub fn zero() -> Self {
        Self { axis_azimuth: 0.0, axis_cos_polar: 1.0, gyro: Vec3::zeros() }
    }
}

/// Orthonormal tangent basis of a unit vector.
fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    // Pick the axis least aligned with n to avoid degeneracy.
    let helper = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vec3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let t1 = n.cross(&helper).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// Apply a held noise sample to the true state.
///
/// The attitude is rewritten as `q = [n sin(psi/2), cos(psi/2)]` and the
/// eigenaxis `n` is tilted by the sampled cone offset; when `psi ~ 0` the
/// eigenaxis is undefined and the attitude is returned unperturbed.
pub fn apply_noise(state: &BodyState, sample: &NoiseSample) -> BodyState {
    let omega = state.omega + sample.gyro;
    let v = state.q.vector();
    let sin_half = v.norm();
    if sin_half < 1e-12 {
        return BodyState { q: state.q, omega };
    }
    let n = v / sin_half;
    let (t1, t2) = tangent_basis(&n);
    let cos_polar = sample.axis_cos_polar;
    let sin_polar = (1.0 - cos_polar * cos_polar).max(0.0).sqrt();
    let n_noisy = n * cos_polar
        + (t1 * sample.axis_azimuth.cos() + t2 * sample.axis_azimuth.sin()) * sin_polar;
    let q = UnitQuaternion::from_raw_normalized(n_noisy * sin_half, state.q.scalar());
    BodyState { q, omega }
}

/// Draw a fresh noise realization and apply it.
pub fn measure(state: &BodyState, config: &NoiseConfig, rng: &mut impl Rng) -> BodyState {
    apply_noise(state, &NoiseSample::draw(config, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attmath::Vec6;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn full_inertia() -> InertiaParams {
        InertiaParams::new(Vec6::new(20.0, 17.0, 15.0, 1.4, 0.9, 1.2)).unwrap()
    }

    #[test]
    fn equilibrium_has_zero_derivative() {
        let plant = Plant::new(full_inertia()).unwrap();
        let state = BodyState { q: UnitQuaternion::identity(), omega: Vec3::zeros() };
        let d = plant.derivative(&state, &Vec3::zeros(), &Vec3::zeros());
        assert_eq!(d.q_v_dot, Vec3::zeros());
        assert_eq!(d.q_w_dot, 0.0);
        assert_eq!(d.omega_dot, Vec3::zeros());
    }

    #[test]
    fn principal_axis_spin_is_torque_free() {
        let diag = InertiaParams::new(Vec6::new(20.0, 17.0, 15.0, 0.0, 0.0, 0.0)).unwrap();
        let plant = Plant::new(diag).unwrap();
        let state = BodyState {
            q: UnitQuaternion::identity(),
            omega: Vec3::new(0.1, 0.0, 0.0),
        };
        let d = plant.derivative(&state, &Vec3::zeros(), &Vec3::zeros());
        assert!(d.omega_dot.norm() < 1e-15);
    }

    /// Torque-free motion must conserve kinetic energy and the inertial
    /// angular momentum vector. Integrates with the same RK4 scheme the
    /// simulator uses.
    #[test]
    fn torque_free_conservation() {
        let plant = Plant::new(full_inertia()).unwrap();
        let mut q = UnitQuaternion::identity();
        let mut omega = Vec3::new(0.3, -0.2, 0.4);
        let h = 0.01;
        let energy0 = 0.5 * omega.dot(&(plant.inertia() * omega));
        let l0 = crate::attmath::rotmat(&q).transpose() * (plant.inertia() * omega);

        let f = |q: &UnitQuaternion, w: &Vec3| {
            let d = plant.derivative(&BodyState { q: *q, omega: *w }, &Vec3::zeros(), &Vec3::zeros());
            (d.q_v_dot, d.q_w_dot, d.omega_dot)
        };
        for _ in 0..1000 {
            // Straightforward RK4 over the 7 scalars.
            let (k1v, k1w, k1o) = f(&q, &omega);
            let q2 = UnitQuaternion::from_raw_unchecked(
                q.vector() + 0.5 * h * k1v,
                q.scalar() + 0.5 * h * k1w,
            );
            let (k2v, k2w, k2o) = f(&q2, &(omega + 0.5 * h * k1o));
            let q3 = UnitQuaternion::from_raw_unchecked(
                q.vector() + 0.5 * h * k2v,
                q.scalar() + 0.5 * h * k2w,
            );
            let (k3v, k3w, k3o) = f(&q3, &(omega + 0.5 * h * k2o));
            let q4 = UnitQuaternion::from_raw_unchecked(q.vector() + h * k3v, q.scalar() + h * k3w);
            let (k4v, k4w, k4o) = f(&q4, &(omega + h * k3o));
            let v = q.vector() + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            let w = q.scalar() + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
            q = UnitQuaternion::from_raw_normalized(v, w);
            omega += h / 6.0 * (k1o + 2.0 * k2o + 2.0 * k3o + k4o);
        }
        let energy = 0.5 * omega.dot(&(plant.inertia() * omega));
        assert!((energy - energy0).abs() < 1e-8, "energy drift {:e}", energy - energy0);
        let l = crate::attmath::rotmat(&q).transpose() * (plant.inertia() * omega);
        assert!((l - l0).norm() < 1e-7, "momentum drift {:e}", (l - l0).norm());
    }

    #[test]
    fn reference_rates_vanish_at_zero() {
        let profile = ReferenceProfile::default();
        let (w, _, _) = profile.rates_at(0.0);
        assert_eq!(w, Vec3::zeros());
    }

    #[test]
    fn reference_derivatives_match_central_differences() {
        let profile = ReferenceProfile::default();
        let h = 1e-4;
        for &t in &[1.0, 5.0, 20.0] {
            let (_, g_dot, g_ddot) = profile.rates_at(t);
            let (gp, gp_dot, _) = profile.rates_at(t + h);
            let (gm, gm_dot, _) = profile.rates_at(t - h);
            let fd_dot = (gp - gm) / (2.0 * h);
            let fd_ddot = (gp_dot - gm_dot) / (2.0 * h);
            assert!((g_dot - fd_dot).norm() < 1e-6, "t = {t}");
            assert!((g_ddot - fd_ddot).norm() < 1e-6, "t = {t}");
        }
    }

    #[test]
    fn reference_cutoff_freezes_rate() {
        let profile = ReferenceProfile { excitation_cutoff: Some(8.0) };
        let (w8, _, _) = profile.rates_at(8.0);
        let (w20, d20, dd20) = profile.rates_at(20.0);
        assert_eq!(w8, w20);
        assert_eq!(d20, Vec3::zeros());
        assert_eq!(dd20, Vec3::zeros());
    }

    #[test]
    fn disturbance_values() {
        let d0 = disturbance_at(0.0);
        assert!((d0 - Vec3::new(-7e-4, 1.8e-3, 5e-4)).norm() < 1e-18);
        let bound = 1e-4 * Vec3::new(17.0, 19.5, 16.0);
        let mut t = 0.0;
        while t < 500.0 {
            let d = disturbance_at(t);
            for i in 0..3 {
                assert!(d[i].abs() <= bound[i] + 1e-15);
            }
            t += 0.37;
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let config = NoiseConfig { cone_half_angle_deg: 0.0, gyro_std: 0.0, seed: None };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let state = BodyState {
            q: UnitQuaternion::from_raw_normalized(Vec3::new(0.2, -0.1, 0.4), 0.8),
            omega: Vec3::new(0.1, 0.2, 0.3),
        };
        let out = measure(&state, &config, &mut rng);
        assert!((out.q.vector() - state.q.vector()).norm() < 1e-15);
        assert_eq!(out.omega, state.omega);
    }

    #[test]
    fn degenerate_axis_left_unperturbed() {
        let config = NoiseConfig { cone_half_angle_deg: 0.1, gyro_std: 0.0, seed: None };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let state = BodyState { q: UnitQuaternion::identity(), omega: Vec3::zeros() };
        let out = measure(&state, &config, &mut rng);
        assert_eq!(out.q.as_array(), state.q.as_array());
    }

    #[test]
    fn cone_noise_statistics() {
        let config = NoiseConfig { cone_half_angle_deg: 0.1, gyro_std: 1e-3, seed: None };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let state = BodyState {
            q: UnitQuaternion::from_raw_normalized(Vec3::new(0.3, -0.3, 0.5), 0.7),
            omega: Vec3::new(0.1, -0.2, 0.05),
        };
        let n_true = state.q.vector().normalize();
        let half_angle = config.cone_half_angle_deg.to_radians();

        let draws = 100_000;
        let mut max_angle: f64 = 0.0;
        let mut gyro_sq_sum = 0.0;
        let mut gyro_sum = 0.0;
        for _ in 0..draws {
            let out = measure(&state, &config, &mut rng);
            let n_meas = out.q.vector().normalize();
            let angle = n_true.dot(&n_meas).clamp(-1.0, 1.0).acos();
            max_angle = max_angle.max(angle);
            let noise = out.omega - state.omega;
            for i in 0..3 {
                gyro_sum += noise[i];
                gyro_sq_sum += noise[i] * noise[i];
            }
        }
        assert!(max_angle <= half_angle + 1e-12);
        let samples = (3 * draws) as f64;
        let mean = gyro_sum / samples;
        let std = (gyro_sq_sum / samples - mean * mean).sqrt();
        assert!((0.9e-3..=1.1e-3).contains(&std), "gyro std = {std:e}");
    }
}
