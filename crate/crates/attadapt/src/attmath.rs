//! Quaternion algebra and the inertia regression operator.
//!
//! Everything here works on the fixed sizes the attitude problem needs:
//! 3-vectors, 3x3 matrices, the 6-vector of packed inertia parameters and the
//! 3x6 regression operator mapping it back to `J * x`.

use nalgebra as na;

use crate::{Error, Result};

pub type Vec3 = na::Vector3<f64>;
pub type Mat3 = na::Matrix3<f64>;
pub type Vec6 = na::Vector6<f64>;
pub type Mat6 = na::Matrix6<f64>;
pub type Mat3x6 = na::SMatrix<f64, 3, 6>;

/// Unit-norm tolerance maintained by quaternion-returning operations.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Cross-product matrix: `skew(x) * y == x.cross(&y)`.
pub fn skew(x: &Vec3) -> Mat3 {
    Mat3::new(0.0, -x.z, x.y, x.z, 0.0, -x.x, -x.y, x.x, 0.0)
}

/// Linear regression operator `L[x]` with `L[x] * theta == J * x` for the
/// packed parameters `theta = [J11, J22, J33, J23, J13, J12]`.
pub fn lmap(x: &Vec3) -> Mat3x6 {
    Mat3x6::from_rows(&[
        na::RowVector6::new(x.x, 0.0, 0.0, 0.0, x.z, x.y),
        na::RowVector6::new(0.0, x.y, 0.0, x.z, 0.0, x.x),
        na::RowVector6::new(0.0, 0.0, x.z, x.y, x.x, 0.0),
    ])
}

/// Unit quaternion stored vector-first: `[v1, v2, v3, w]`.
///
/// The scalar part is kept last so that component formulas involving
/// `q = [q_v^T, q_4]^T` transcribe directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    v: Vec3,
    w: f64,
}

impl UnitQuaternion {
    /// Identity rotation `[0, 0, 0, 1]`.
    pub fn identity() -> Self {
        Self { v: Vec3::zeros(), w: 1.0 }
    }

    /// Build from components, requiring the norm to be within 1e-6 of one;
    /// the stored value is renormalized exactly.
    pub fn new(v: Vec3, w: f64) -> Result<Self> {
        let norm = (v.norm_squared() + w * w).sqrt();
        if !(norm.is_finite() && (norm - 1.0).abs() < 1e-6) {
            return Err(Error::Config(format!(
                "quaternion norm {norm} is not within 1e-6 of unity"
            )));
        }
        Ok(Self { v: v / norm, w: w / norm })
    }

    /// Build from a vector part and the sign of the scalar part, with
    /// `w = sign * sqrt(1 - |v|^2)`.
    pub fn from_vector_and_sign(v: Vec3, scalar_sign: f64) -> Result<Self> {
        let vv = v.norm_squared();
        if vv > 1.0 {
            return Err(Error::Config(format!(
                "quaternion vector part has norm {} > 1",
                vv.sqrt()
            )));
        }
        let w = scalar_sign.signum() * (1.0 - vv).sqrt();
        Ok(Self { v, w })
    }

    /// Renormalize raw components. Used after each integrator step.
    pub fn from_raw_normalized(v: Vec3, w: f64) -> Self {
        let norm = (v.norm_squared() + w * w).sqrt();
        Self { v: v / norm, w: w / norm }
    }

    /// Wrap raw components without touching them. Intermediate Runge-Kutta
    /// stage states are slightly off the unit sphere by construction.
    pub(crate) fn from_raw_unchecked(v: Vec3, w: f64) -> Self {
        Self { v, w }
    }

    pub fn vector(&self) -> Vec3 {
        self.v
    }

    pub fn scalar(&self) -> f64 {
        self.w
    }

    pub fn norm(&self) -> f64 {
        (self.v.norm_squared() + self.w * self.w).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Self { v: -self.v, w: self.w }
    }

    /// Hamilton product `self ⊙ rhs`, renormalized.
    pub fn multiply(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        let v = self.w * rhs.v + rhs.w * self.v + self.v.cross(&rhs.v);
        let w = self.w * rhs.w - self.v.dot(&rhs.v);
        UnitQuaternion::from_raw_normalized(v, w)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.v.x, self.v.y, self.v.z, self.w]
    }
}

/// Quaternion product `a ⊙ b`.
pub fn quat_multiply(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    a.multiply(b)
}

/// Error quaternion `q_e = q_r^{-1} ⊙ q`.
pub fn quat_error(q: &UnitQuaternion, q_r: &UnitQuaternion) -> UnitQuaternion {
    q_r.conjugate().multiply(q)
}

/// Rotation matrix of an error quaternion, mapping reference-frame vectors
/// into the body frame:
/// `C = (w^2 - v^T v) I + 2 v v^T - 2 w S(v)`.
pub fn rotmat(q: &UnitQuaternion) -> Mat3 {
    let v = q.vector();
    let w = q.scalar();
    Mat3::identity() * (w * w - v.norm_squared()) + 2.0 * v * v.transpose() - 2.0 * w * skew(&v)
}

/// Kinematics operator `Q(q) = (S(q_v) + q_4 I) / 2`, so that
/// `d/dt q_v = Q(q) * omega`.
pub fn kinematics_matrix(q: &UnitQuaternion) -> Mat3 {
    0.5 * (skew(&q.vector()) + q.scalar() * Mat3::identity())
}

/// Scalar-part kinematics `d/dt q_4 = -q_v^T omega / 2`.
pub fn scalar_rate(q: &UnitQuaternion, omega: &Vec3) -> f64 {
    -0.5 * q.vector().dot(omega)
}

/// Packed inertia parameters `theta = [J11, J22, J33, J23, J13, J12]` (kg m^2).
///
/// Construction checks that the reconstructed matrix is symmetric positive
/// definite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertiaParams {
    theta: Vec6,
}

impl InertiaParams {
    pub fn new(theta: Vec6) -> Result<Self> {
        let params = Self { theta };
        let min_eig = params.min_eigenvalue();
        if !(min_eig.is_finite() && min_eig > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eig });
        }
        Ok(params)
    }

    pub fn theta(&self) -> Vec6 {
        self.theta
    }

    /// Reconstruct the symmetric 3x3 inertia matrix.
    pub fn matrix(&self) -> Mat3 {
        let t = &self.theta;
        Mat3::new(t[0], t[5], t[4], t[5], t[1], t[3], t[4], t[3], t[2])
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let eig = self.matrix().symmetric_eigenvalues();
        eig.min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let eig = self.matrix().symmetric_eigenvalues();
        eig.max()
    }

    /// Spectral condition number of the reconstructed matrix.
    pub fn condition_number(&self) -> f64 {
        let eig = self.matrix().symmetric_eigenvalues();
        let min = eig.amin();
        if min == 0.0 {
            f64::INFINITY
        } else {
            eig.amax() / min
        }
    }
}
