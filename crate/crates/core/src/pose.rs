//! Rigid transforms and their Lie-algebra parameterization.
//!
//! Project-wide convention: a [`Pose`] maps world coordinates to camera
//! coordinates (`p_cam = R * p_world + t`). Camera-to-world is always the
//! explicit inverse. Rotations are stored as matrices so the projection hot
//! paths stay cheap; incremental updates go through the [`Twist`] exponential
//! so they stay on the manifold.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

const ORTHONORMALITY_TOL: f64 = 1e-9;

/// A rigid transform `p -> R p + t` with `R` orthonormal, `det(R) = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// se(3) coordinates: a rotation 3-vector in radians and a translation
/// 3-vector in scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Nearest rotation matrix in the Frobenius sense (SVD projection).
fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("3x3 svd");
    let vt = svd.v_t.expect("3x3 svd");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // Flip the weakest direction to land in SO(3) rather than O(3).
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

fn is_orthonormal(m: &Matrix3<f64>) -> bool {
    let gram = m.transpose() * m;
    let mut err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((gram[(i, j)] - target).abs());
        }
    }
    err <= ORTHONORMALITY_TOL && (m.determinant() - 1.0).abs() <= ORTHONORMALITY_TOL
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, re-orthonormalizing the rotation if it drifted beyond
    /// 1e-9 from SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = if is_orthonormal(&rotation) {
            rotation
        } else {
            orthonormalize(&rotation)
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `compose(a, b)` applies `b` first: `(a ∘ b)(p) = a(b(p))`.
    pub fn compose(a: &Pose, b: &Pose) -> Pose {
        Pose::new(a.rotation * b.rotation, a.rotation * b.translation + a.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// Camera center in world coordinates, reading `self` as world-to-camera.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-to-camera pose for a camera at `eye` looking towards `target`.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Pose {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(up).normalize();
        let down = fwd.cross(&right);
        // Rows of R are the camera axes (x right, y down, z forward).
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            fwd.transpose(),
        ]);
        let translation = -(rotation * eye);
        Pose::new(rotation, translation)
    }

    /// Left-multiplied exponential update: `exp(delta) ∘ self`.
    ///
    /// A zero twist returns the pose bit-identically.
    pub fn perturbed(&self, delta: &Twist) -> Pose {
        if delta.rotation == Vector3::zeros() && delta.translation == Vector3::zeros() {
            return *self;
        }
        Pose::compose(&delta.exp(), self)
    }

    /// Logarithm, inverse of [`Twist::exp`].
    pub fn log(&self) -> Twist {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        let omega = q.scaled_axis();
        let theta2 = omega.norm_squared();
        let v_inv = if theta2 < 1e-16 {
            Matrix3::identity() - 0.5 * skew(&omega)
        } else {
            let theta = theta2.sqrt();
            let k = skew(&omega);
            let coeff = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
            Matrix3::identity() - 0.5 * k + coeff * (k * k)
        };
        Twist {
            rotation: omega,
            translation: v_inv * self.translation,
        }
    }
}

impl Twist {
    pub fn zero() -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    /// Layout `[wx, wy, wz, tx, ty, tz]`.
    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    /// SE(3) exponential.
    pub fn exp(&self) -> Pose {
        let omega = self.rotation;
        let theta2 = omega.norm_squared();
        let k = skew(&omega);
        let (rot, v) = if theta2 < 1e-16 {
            // Second-order series, exact enough below the sqrt of machine eps.
            (
                Matrix3::identity() + k + 0.5 * (k * k),
                Matrix3::identity() + 0.5 * k + (k * k) / 6.0,
            )
        } else {
            let theta = theta2.sqrt();
            let a = theta.sin() / theta;
            let b = (1.0 - theta.cos()) / theta2;
            let c = (theta - theta.sin()) / (theta2 * theta);
            (
                Matrix3::identity() + a * k + b * (k * k),
                Matrix3::identity() + b * k + c * (k * k),
            )
        };
        Pose::new(rot, v * self.translation)
    }
}
