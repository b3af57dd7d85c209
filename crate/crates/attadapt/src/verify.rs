//! Self-check suite: the algebraic identities and behavioral properties the
//! implementation is built on, runnable from the CLI.
//!
//! Each check reports its maximum observed deviation against a fixed
//! tolerance. A deliberately corrupted `mu2` can be injected to demonstrate
//! that the PDE check actually bites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::attmath::{kinematics_matrix, lmap, skew, quat_error, UnitQuaternion, Mat6, Vec3, Vec6};
use crate::drem::{adjugate6, det6, pe_floor_monitor};
use crate::errstate::{gibbs_vector, lemma1_gap, lemma2_bounds, make_tracking_error};
use crate::plant::BodyState;
use crate::regressor::{build_regressors, mu, BodyFrameReference};
use crate::sim::{run_scenario, Scenario};

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    /// Maximum observed deviation, in the check's own measure.
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, deviation: f64, tolerance: f64, detail: String) -> Self {
        let pass = deviation.is_finite() && deviation <= tolerance;
        Self { name, deviation, tolerance, pass, detail }
    }
}

/// Knobs for the suite.
#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Inject an error into the `mu` used by the PDE check; the check must
    /// then fail.
    pub corrupt_mu2: bool,
}

struct RandomPoint {
    omega: Vec3,
    omega_hat: Vec3,
    err: crate::errstate::TrackingError,
    frames: BodyFrameReference,
    k_p: f64,
}

fn random_point(rng: &mut impl Rng) -> RandomPoint {
    let rand_quat = |rng: &mut dyn rand::RngCore| {
        UnitQuaternion::from_raw_normalized(
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            rng.random_range(-1.0..1.0),
        )
    };
    let q_r = rand_quat(rng);
    let mut q = rand_quat(rng);
    while quat_error(&q, &q_r).scalar().abs() < 0.2 {
        q = rand_quat(rng);
    }
    let reference = crate::plant::ReferenceState {
        q_r,
        omega_r: Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
        omega_r_dot: Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
        omega_r_ddot: Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
    };
    let omega = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let lambda = if rng.random_bool(0.5) { 0.1 } else { -0.1 };
    let err = make_tracking_error(&BodyState { q, omega }, &reference, lambda);
    let frames = BodyFrameReference::new(&err.q_e, &reference);
    RandomPoint {
        omega,
        omega_hat: Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        err,
        frames,
        k_p: 1.5,
    }
}

fn check_lemma1() -> CheckResult {
    let mut worst: f64 = 0.0;
    for i in 0..500 {
        let x = 1e-3f64 * (1000.0f64).powf(i as f64 / 499.0);
        worst = worst.max(-lemma1_gap(x)).max(-lemma1_gap(-x));
    }
    CheckResult::new(
        "lemma1-log-bound",
        worst.max(0.0),
        1e-12,
        "max negative slack of -ln(x^2) <= (1-x^2)/|x| over 1000 grid points".into(),
    )
}

fn check_lemma2() -> CheckResult {
    let mut worst: f64 = 0.0;
    for step in 1..=19 {
        let delta = 0.05 * step as f64;
        for alpha in [0.1, 0.5, 1.0, 5.0] {
            let (lower, upper) = lemma2_bounds(delta, alpha);
            for k in 0..1000 {
                let x = delta + (1.0 - delta) * k as f64 / 999.0;
                let v_q = -alpha * (x * x).ln();
                let qev_sq = 1.0 - x * x;
                worst = worst.max(lower * qev_sq - v_q).max(v_q - upper * qev_sq);
            }
        }
    }
    CheckResult::new(
        "lemma2-barrier-sandwich",
        worst.max(0.0),
        1e-12,
        "max violation of the barrier sandwich over the (delta, alpha) grid".into(),
    )
}

fn check_phi_decomposition() -> CheckResult {
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let p = random_point(&mut rng);
        let b = match build_regressors(&p.omega, &p.err, &p.frames, &p.omega_hat, p.k_p) {
            Ok(b) => b,
            Err(_) => continue,
        };
        let xi = gibbs_vector(&p.err.q_e).unwrap();
        let q_ev_dot = kinematics_matrix(&p.err.q_e) * p.err.omega_e;
        let bracket = skew(&p.omega) * p.frames.omega_r_body - p.frames.omega_r_dot_body
            + p.k_p * p.err.s
            + xi
            + p.err.lambda_slope * q_ev_dot;
        let direct = -skew(&p.omega) * lmap(&p.omega) + lmap(&bracket);
        worst = worst.max((b.phi - (b.phi1 + b.phi2)).amax());
        worst = worst.max((b.phi - direct).amax());
    }
    CheckResult::new(
        "phi-decomposition",
        worst,
        1e-10,
        "max |Phi - (Phi1 + Phi2)| and |Phi - direct form| over 2000 random states".into(),
    )
}

fn check_mu_jacobian(corrupt: bool) -> CheckResult {
    let mut rng = ChaCha12Rng::seed_from_u64(103);
    let fd = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let p = random_point(&mut rng);
        let b = match build_regressors(&p.omega, &p.err, &p.frames, &p.omega_hat, p.k_p) {
            Ok(b) => b,
            Err(_) => continue,
        };
        let eval_mu = |omega: &Vec3| {
            let mut m = mu(
                omega,
                &p.omega_hat,
                &b.y,
                &p.frames.omega_r_body,
                &p.err.q_e,
                p.err.lambda_slope,
                p.k_p,
            );
            if corrupt {
                // Emulates a botched closed-form coefficient.
                m[3] += 1e-3 * omega.x * omega.x;
            }
            m
        };
        let target = (b.phi + b.psi).transpose();
        for j in 0..3 {
            let mut wp = p.omega;
            let mut wm = p.omega;
            wp[j] += fd;
            wm[j] -= fd;
            let col = (eval_mu(&wp) - eval_mu(&wm)) / (2.0 * fd);
            for i in 0..6 {
                worst = worst.max((col[i] - target[(i, j)]).abs());
            }
        }
    }
    CheckResult::new(
        "mu-jacobian-pde",
        worst,
        1e-5,
        "max |d mu/d omega - (Phi+Psi)^T| by central differences, 200 random states".into(),
    )
}

fn check_adjugate() -> CheckResult {
    let mut rng = ChaCha12Rng::seed_from_u64(107);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let g = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = g.transpose() * g;
        let residual = (adjugate6(&n) * n - det6(&n) * Mat6::identity()).amax();
        let scale = det6(&n).abs().max(adjugate6(&n).amax() * n.amax()).max(1e-30);
        worst = worst.max(residual / scale);
    }
    CheckResult::new(
        "adjugate-identity",
        worst,
        1e-8,
        "max relative |adj(N) N - det(N) I| over 200 random PSD matrices".into(),
    )
}

fn check_epsilon_identity() -> CheckResult {
    let mut scenario = Scenario::nominal_case1();
    scenario.duration = 12.0;
    let theta = Vec6::from_row_slice(&scenario.plant.theta_true);
    match run_scenario(&scenario) {
        Ok(log) => {
            // Relative once the extended regressor is alive (Delta_N above the
            // detection floor); before that both sides are numerically zero
            // and only the absolute size is meaningful.
            let mut worst_rel: f64 = 0.0;
            let mut worst_abs: f64 = 0.0;
            for rec in &log.records {
                let d = &rec.derived;
                let theta_err = d.theta_est - theta;
                let err = (d.eps - d.delta_n * theta_err).norm();
                worst_abs = worst_abs.max(err);
                if d.delta_n > scenario.diagnostics.eps_pe {
                    let scale = d.eps.norm().max((d.delta_n * theta_err).norm()).max(1e-30);
                    worst_rel = worst_rel.max(err / scale);
                }
            }
            let dev = worst_rel.max(if worst_abs > 1e-10 { f64::INFINITY } else { 0.0 });
            CheckResult::new(
                "epsilon-identity",
                dev,
                1e-8,
                format!(
                    "relative |eps - Delta_N theta_err| {worst_rel:.3e} past the excitation floor; absolute {worst_abs:.3e} everywhere"
                ),
            )
        }
        Err(e) => CheckResult::new("epsilon-identity", f64::INFINITY, 1e-8, format!("run failed: {e}")),
    }
}

fn check_lemma3_monitor() -> CheckResult {
    let mut scenario = Scenario::excitation_cutoff();
    scenario.duration = 20.0;
    match run_scenario(&scenario) {
        Ok(log) => {
            let times = log.times();
            let delta_n: Vec<f64> = log.records.iter().map(|r| r.derived.delta_n).collect();
            let min_delta_n = delta_n.iter().cloned().fold(f64::INFINITY, f64::min);
            match pe_floor_monitor(&times, &delta_n, scenario.diagnostics.eps_pe) {
                Some(floor) => {
                    let retained = log
                        .records
                        .iter()
                        .filter(|r| r.t >= 10.0)
                        .map(|r| r.derived.delta_n)
                        .fold(f64::INFINITY, f64::min);
                    let dev = (-min_delta_n).max(scenario.diagnostics.eps_pe - retained).max(0.0);
                    CheckResult::new(
                        "lemma3-floor",
                        dev,
                        1e-12,
                        format!(
                            "onset t_s = {:.2} s, floor {:.3e}; Delta_N stays above eps_pe after cutoff",
                            floor.t_s, floor.hbar
                        ),
                    )
                }
                None => CheckResult::new(
                    "lemma3-floor",
                    f64::INFINITY,
                    1e-12,
                    "no excitation onset detected".into(),
                ),
            }
        }
        Err(e) => CheckResult::new("lemma3-floor", f64::INFINITY, 1e-12, format!("run failed: {e}")),
    }
}

fn check_non_integrability() -> CheckResult {
    let mut rng = ChaCha12Rng::seed_from_u64(109);
    let p = random_point(&mut rng);
    let q_mat = kinematics_matrix(&p.err.q_e);
    let h = 1e-6;
    let phi2_rows = |omega: &Vec3| {
        crate::regressor::phi2_at(omega, &p.frames.omega_r_body, &q_mat, p.err.lambda_slope)
    };
    let row_partial = |i: usize, j: usize| -> Vec6 {
        let mut wp = p.omega;
        let mut wm = p.omega;
        wp[j] += h;
        wm[j] -= h;
        (phi2_rows(&wp).row(i) - phi2_rows(&wm).row(i)).transpose() / (2.0 * h)
    };
    let mut max_asym: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                max_asym = max_asym.max((row_partial(i, j) - row_partial(j, i)).amax());
            }
        }
    }
    let threshold = 1e-3;
    CheckResult::new(
        "phi2-non-integrability",
        (threshold - max_asym).max(0.0),
        0.0,
        format!("cross-partial asymmetry {max_asym:.3e} (must exceed {threshold:.0e})"),
    )
}

/// Run the whole suite.
pub fn run_all(options: &VerifyOptions) -> Vec<CheckResult> {
    vec![
        check_lemma1(),
        check_lemma2(),
        check_phi_decomposition(),
        check_mu_jacobian(options.corrupt_mu2),
        check_adjugate(),
        check_epsilon_identity(),
        check_lemma3_monitor(),
        check_non_integrability(),
    ]
}
