//! Rigid-body attitude tracking with a composite immersion-and-invariance
//! adaptive controller and DREM-based online inertia identification.
//!
//! The crate simulates the closed loop of a fully actuated rigid body tracking
//! a reference attitude under unknown inertia. The controller combines a
//! non-certainty-equivalence (I&I) adaptive law, built around a barrier
//! attitude-error function that rules out unwinding, with a prediction-error
//! learning term obtained from regressor filtering, Kreisselmeier extension and
//! dynamic regressor extension and mixing (DREM). An auxiliary linear
//! time-varying filter turns interval excitation into a persistently exciting
//! scalar regressor, so the inertia estimate converges without PE. Optional
//! power terms in the adaptation give finite- or fixed-time parameter
//! convergence.
//!
//! Layout:
//!
//! - [`attmath`] — quaternion algebra, the inertia regression operator.
//! - [`plant`] — rigid-body truth model, reference trajectory, disturbance and
//!   measurement-noise models.
//! - [`errstate`] — tracking errors, barrier function, its algebraic bounds.
//! - [`regressor`] — regressor decomposition and the `mu` machinery solving the
//!   reconfigured integrability PDE.
//! - [`drem`] — filtered regressor, extended linear regressor equation, mixing
//!   and the PE-recovering LTV extension.
//! - [`controller`] — the control and adaptation laws plus a plain
//!   certainty-equivalence baseline.
//! - [`sim`] — fixed-step RK4 integration of the full augmented closed loop,
//!   scenarios, trajectory logging.
//! - [`diagnostics`] — Lyapunov functions, dynamic scaling, convergence
//!   metrics; analysis-side only, never fed back.
//! - [`verify`] — the self-check suite driven by the CLI `verify` command.

pub mod attmath;
pub mod controller;
pub mod diagnostics;
pub mod drem;
pub mod errstate;
pub mod plant;
pub mod regressor;
pub mod sim;
pub mod verify;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid scenario or gain configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// The packed inertia parameters do not form a positive definite matrix.
    #[error("inertia matrix is not positive definite (min eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { min_eig: f64 },
    /// The inertia matrix cannot be inverted reliably.
    #[error("inertia matrix is numerically singular (condition number {cond:.3e})")]
    SingularInertia { cond: f64 },
    /// Barrier function evaluated too close to the q_e4 = 0 set.
    #[error("barrier blow-up: |q_e4| = {value:.3e} is below 1e-12")]
    BarrierBlowup { value: f64 },
    /// Initial tracking error outside the permissible set.
    #[error("initial error quaternion outside the permissible set: |q_e4(0)| = {value:.3e}")]
    OutsidePermissibleSet { value: f64 },
    /// |q_e4| collapsed during a run; the anti-unwinding invariant is violated.
    #[error("unwinding guard tripped at t = {t:.4} s (|q_e4| = {value:.3e})")]
    UnwindingGuard { t: f64, value: f64 },
    /// A derivative or state component stopped being finite.
    #[error("non-finite value in `{channel}` at t = {t:.4} s")]
    NonFinite { t: f64, channel: String },
    /// Analysis window contains no samples.
    #[error("empty analysis window")]
    EmptyWindow,
    /// Scaling-factor state left its domain.
    #[error("dynamic scaling state r = {value:.3e} is not positive")]
    NonPositiveScaling { value: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
