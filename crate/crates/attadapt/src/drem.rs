//! Regressor filtering, Kreisselmeier extension, DREM mixing and the LTV
//! extension that keeps the scalar regressor exciting after the excitation
//! interval ends.
//!
//! Pipeline: first-order lag filters turn the torque balance into the linear
//! regressor equation `u_f = W_a theta`; a second lag accumulates
//! `M = int e^{-b(t-tau)} W_a^T u_f` and `N = int e^{-b(t-tau)} W_a^T W_a`,
//! giving the square equation `M = N theta`; multiplying by `adj(N)` decouples
//! it into scalar equations `Y_i = Delta theta_i` with `Delta = k_I det(N)`;
//! finally the filter states `(chi, Xi)` extend `(Y, Delta)` to
//! `(Y_N, Delta_N)` whose regressor keeps a positive floor once excitation has
//! been seen.

use nalgebra as na;

use crate::attmath::{lmap, skew, Mat3x6, Mat6, Vec3, Vec6};

/// Filter memories of the identification chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DremState {
    pub omega_f: Vec3,
    pub w_f: Mat3x6,
    pub u_f: Vec3,
    pub m: Vec6,
    pub n: Mat6,
    pub chi: Vec6,
    pub xi: f64,
}

impl DremState {
    /// Initial conditions: `omega_f(0) = omega(0)/a`, everything else zero
    /// except `Xi(0) = 1` and a configurable `chi(0)`.
    pub fn initial(omega0: &Vec3, a: f64, chi0: &Vec6) -> Self {
        Self {
            omega_f: omega0 / a,
            w_f: Mat3x6::zeros(),
            u_f: Vec3::zeros(),
            m: Vec6::zeros(),
            n: Mat6::zeros(),
            chi: *chi0,
            xi: 1.0,
        }
    }
}

/// Time derivative of a [`DremState`]; same layout.
pub type DremDerivative = DremState;

/// Torque regressor `W = -S(omega) L[omega]`, so that
/// `J omega_dot = W theta + u`.
pub fn torque_regressor(omega: &Vec3) -> Mat3x6 {
    -skew(omega) * lmap(omega)
}

/// Computable filtered-rate derivative `omega_f_dot = omega - a omega_f`.
pub fn omega_f_dot(omega: &Vec3, omega_f: &Vec3, a: f64) -> Vec3 {
    omega - a * omega_f
}

/// Filtered regressor `W_a = L[omega_f_dot] - W_f` with `u_f = W_a theta`.
pub fn filtered_regressor(state: &DremState, omega_f_dot: &Vec3) -> Mat3x6 {
    lmap(omega_f_dot) - state.w_f
}

/// Derivative of the identification filters given the measured rate, the
/// applied torque and the current mixed pair `(Y, Delta)`.
pub fn drem_derivative(
    state: &DremState,
    omega: &Vec3,
    u: &Vec3,
    a: f64,
    b: f64,
    delta: f64,
    y: &Vec6,
) -> DremDerivative {
    let w = torque_regressor(omega);
    let ofd = omega_f_dot(omega, &state.omega_f, a);
    let w_a = filtered_regressor(state, &ofd);
    DremDerivative {
        omega_f: ofd,
        w_f: w - a * state.w_f,
        u_f: u - a * state.u_f,
        m: -b * state.m + w_a.transpose() * state.u_f,
        n: -b * state.n + w_a.transpose() * w_a,
        chi: delta * (y - delta * state.chi),
        xi: -delta * delta * state.xi,
    }
}

/// Determinant of a 6x6 matrix via LU with partial pivoting.
pub fn det6(m: &Mat6) -> f64 {
    m.determinant()
}

/// Adjugate of a 6x6 matrix by the cofactor route: `adj(m)[i][j]` is the
/// signed 5x5 minor with row `j` and column `i` removed. Polynomial in the
/// entries, so well behaved even when `m` is singular.
pub fn adjugate6(m: &Mat6) -> Mat6 {
    let mut adj = Mat6::zeros();
    for row in 0..6 {
        for col in 0..6 {
            let mut minor = na::SMatrix::<f64, 5, 5>::zeros();
            let mut mi = 0;
            for i in 0..6 {
                if i == col {
                    continue;
                }
                let mut mj = 0;
                for j in 0..6 {
                    if j == row {
                        continue;
                    }
                    minor[(mi, mj)] = m[(i, j)];
                    mj += 1;
                }
                mi += 1;
            }
            let sign = if (row + col) % 2 == 0 { 1.0 } else { -1.0 };
            adj[(row, col)] = sign * minor.determinant();
        }
    }
    adj
}

/// The mixed and extended scalar linear regressor equations.
#[derive(Debug, Clone, Copy)]
pub struct ScalarLre {
    pub y: Vec6,
    pub delta: f64,
    pub y_n: Vec6,
    pub delta_n: f64,
}

/// DREM mixing: `Y = k_I adj(N) M`, `Delta = k_I det(N)`.
pub fn mix(n: &Mat6, m: &Vec6, k_i: f64) -> (Vec6, f64) {
    (k_i * (adjugate6(n) * m), k_i * det6(n))
}

/// Cramer's-rule form of one mixed component:
/// `Y_i = k_I det(N with column i replaced by M)`.
pub fn cramer_component(n: &Mat6, m: &Vec6, k_i: f64, i: usize) -> f64 {
    let mut patched = *n;
    patched.set_column(i, m);
    k_i * det6(&patched)
}

/// LTV extension of the scalar equations:
/// `Y_N = Y + k_N (chi - Xi chi0)`, `Delta_N = Delta + k_N (1 - Xi)`.
pub fn extend(chi: &Vec6, xi: f64, chi0: &Vec6, y: &Vec6, delta: f64, k_n: f64) -> (Vec6, f64) {
    (y + k_n * (chi - xi * chi0), delta + k_n * (1.0 - xi))
}

/// Convenience: mixing plus extension from the current filter state.
pub fn scalar_lre(state: &DremState, chi0: &Vec6, k_i: f64, k_n: f64) -> ScalarLre {
    let (y, delta) = mix(&state.n, &state.m, k_i);
    let (y_n, delta_n) = extend(&state.chi, state.xi, chi0, &y, delta, k_n);
    ScalarLre { y, delta, y_n, delta_n }
}

/// Detected excitation onset and regressor floor.
#[derive(Debug, Clone, Copy)]
pub struct PeFloor {
    /// First time after which `Delta_N` stays above the threshold.
    pub t_s: f64,
    /// Infimum of `Delta_N` after `t_s`.
    pub hbar: f64,
}

/// Scan a `Delta_N` history for the first time it exceeds `eps_pe` and never
/// drops back. Returns `None` when no such time exists.
pub fn pe_floor_monitor(times: &[f64], delta_n: &[f64], eps_pe: f64) -> Option<PeFloor> {
    assert_eq!(times.len(), delta_n.len());
    if times.is_empty() {
        return None;
    }
    // Walk backwards to find the last sample at or below the threshold.
    let mut onset = None;
    for k in (0..delta_n.len()).rev() {
        if delta_n[k] <= eps_pe {
            break;
        }
        onset = Some(k);
    }
    let k = onset?;
    let hbar = delta_n[k..].iter().cloned().fold(f64::INFINITY, f64::min);
    Some(PeFloor { t_s: times[k], hbar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_psd(rng: &mut impl Rng, scale: f64) -> Mat6 {
        let g = Mat6::from_fn(|_, _| rng.random_range(-scale..scale));
        g.transpose() * g
    }

    #[test]
    fn zero_state_zero_inputs() {
        let state = DremState::initial(&Vec3::zeros(), 5.0, &Vec6::zeros());
        let d = drem_derivative(&state, &Vec3::zeros(), &Vec3::zeros(), 5.0, 0.5, 0.0, &Vec6::zeros());
        assert_eq!(d.omega_f, Vec3::zeros());
        assert_eq!(d.w_f, Mat3x6::zeros());
        assert_eq!(d.u_f, Vec3::zeros());
        assert_eq!(d.m, Vec6::zeros());
        assert_eq!(d.n, Mat6::zeros());
        assert_eq!(d.chi, Vec6::zeros());
        assert_eq!(d.xi, 0.0);
    }

    #[test]
    fn static_plant_has_zero_filtered_regressor() {
        let state = DremState::initial(&Vec3::zeros(), 5.0, &Vec6::zeros());
        let ofd = omega_f_dot(&Vec3::zeros(), &state.omega_f, 5.0);
        assert_eq!(filtered_regressor(&state, &ofd), Mat3x6::zeros());
    }

    /// With constant Delta = c and Y = 0 the chi/Xi subsystem has the closed
    /// form chi = chi0 e^{-c^2 t}, Xi = e^{-c^2 t}.
    #[test]
    fn ltv_filter_closed_form() {
        let c = 0.7;
        let chi0 = Vec6::new(1.0, -2.0, 0.5, 3.0, -1.0, 0.25);
        let mut chi = chi0;
        let mut xi = 1.0;
        let h = 1e-3;
        let steps = 2000;
        for _ in 0..steps {
            // RK4 on the two-field subsystem.
            let f = |chi: &Vec6, xi: f64| (c * (Vec6::zeros() - c * chi), -c * c * xi);
            let (k1c, k1x) = f(&chi, xi);
            let (k2c, k2x) = f(&(chi + 0.5 * h * k1c), xi + 0.5 * h * k1x);
            let (k3c, k3x) = f(&(chi + 0.5 * h * k2c), xi + 0.5 * h * k2x);
            let (k4c, k4x) = f(&(chi + h * k3c), xi + h * k3x);
            chi += h / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c);
            xi += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        }
        let t = h * steps as f64;
        let decay = (-c * c * t).exp();
        assert!((chi - chi0 * decay).amax() < 1e-10);
        assert!((xi - decay).abs() < 1e-10);
    }

    #[test]
    fn adjugate_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(67);
        for _ in 0..100 {
            let n = random_psd(&mut rng, 1.0);
            let adj = adjugate6(&n);
            let det = det6(&n);
            let residual = (adj * n - det * Mat6::identity()).amax();
            let scale = det.abs().max(adj.amax() * n.amax()).max(1e-30);
            assert!(residual / scale < 1e-8, "adj residual {:e}", residual / scale);
        }
    }

    #[test]
    fn adjugate_of_identity_and_singular() {
        assert!((adjugate6(&Mat6::identity()) - Mat6::identity()).amax() < 1e-14);
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        let mut n = random_psd(&mut rng, 1.0);
        // Zero out a row and column: singular, Delta must be exactly ~0.
        for k in 0..6 {
            n[(2, k)] = 0.0;
            n[(k, 2)] = 0.0;
        }
        let (_, delta) = mix(&n, &Vec6::new(1.0, 1.0, 1.0, 1.0, 1.0, 1.0), 1.0);
        assert!(delta.abs() < 1e-12);
    }

    #[test]
    fn mix_identity_matrix() {
        let m = Vec6::new(1.0, -2.0, 3.0, -4.0, 5.0, -6.0);
        let (y, delta) = mix(&Mat6::identity(), &m, 1.0);
        assert!((y - m).amax() < 1e-14);
        assert!((delta - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mix_recovers_parameters_from_consistent_data() {
        let mut rng = ChaCha12Rng::seed_from_u64(73);
        let theta = Vec6::new(20.0, 17.0, 15.0, 1.4, 0.9, 1.2);
        for _ in 0..100 {
            let n = random_psd(&mut rng, 1.0) + 0.1 * Mat6::identity();
            let m = n * theta;
            let (y, delta) = mix(&n, &m, 1.0);
            let err = (y - delta * theta).amax() / (delta.abs() * theta.amax());
            assert!(err < 1e-8, "relative error {err:e}");
        }
    }

    #[test]
    fn cramer_matches_adjugate_route() {
        let mut rng = ChaCha12Rng::seed_from_u64(79);
        for _ in 0..50 {
            let n = random_psd(&mut rng, 1.0);
            let m = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let (y, _) = mix(&n, &m, 3.0);
            for i in 0..6 {
                let yi = cramer_component(&n, &m, 3.0, i);
                let scale = y.amax().max(1e-12);
                assert!((y[i] - yi).abs() / scale < 1e-10);
            }
        }
    }

    #[test]
    fn extension_inactive_at_start() {
        let chi0 = Vec6::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6);
        let y = Vec6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        let (y_n, delta_n) = extend(&chi0, 1.0, &chi0, &y, 0.25, 8.0);
        assert_eq!(y_n, y);
        assert_eq!(delta_n, 0.25);
    }

    #[test]
    fn extension_stays_zero_without_excitation() {
        let zero = Vec6::zeros();
        let (y_n, delta_n) = extend(&zero, 1.0, &zero, &zero, 0.0, 8.0);
        assert_eq!(y_n, zero);
        assert_eq!(delta_n, 0.0);
    }

    #[test]
    fn monitor_detects_analytic_crossing() {
        let k_n = 8.0;
        let eps = 1e-6;
        let times: Vec<f64> = (0..5000).map(|k| k as f64 * 0.01).collect();
        let series: Vec<f64> = times.iter().map(|&t| k_n * (1.0 - (-t).exp())).collect();
        let floor = pe_floor_monitor(&times, &series, eps).unwrap();
        // Crossing of k_n (1 - e^{-t}) = eps at t = -ln(1 - eps/k_n).
        let t_cross = -(1.0 - eps / k_n).ln();
        assert!((floor.t_s - t_cross).abs() <= 0.01 + 1e-12);
        assert!((floor.hbar - k_n * (1.0 - (-floor.t_s).exp())).abs() < 1e-12);
    }

    #[test]
    fn monitor_rejects_flat_zero() {
        let times: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let series = vec![0.0; 100];
        assert!(pe_floor_monitor(&times, &series, 1e-6).is_none());
    }

    #[test]
    fn monitor_ignores_early_transient_spike() {
        let times: Vec<f64> = (0..6).map(|k| k as f64).collect();
        let series = vec![0.0, 5.0, 0.0, 2.0, 3.0, 4.0];
        let floor = pe_floor_monitor(&times, &series, 1.0).unwrap();
        assert_eq!(floor.t_s, 3.0);
        assert_eq!(floor.hbar, 2.0);
    }
}
