//! Closed-form point-set registration: weighted least-squares similarity
//! fitting (SVD-based) and linear camera resection from 3D-pixel
//! correspondences. Both are used to seed the global pointmap alignment and
//! the similarity fit also backs the trajectory-evaluation alignment.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::pose::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("need at least {needed} points with positive weight, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point sets have mismatched lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
}

/// A similarity transform `p -> scale * R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Similarity {
        let rt = self.rotation.transpose();
        Similarity {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// Reads off the rigid pose mapping metric source coordinates to the
    /// destination frame rescaled by `1 / scale`, i.e. `R p + t / scale`.
    pub fn rigid_part(&self) -> Pose {
        Pose::new(self.rotation, self.translation / self.scale)
    }
}

/// Weighted least-squares similarity (or rigid, with `with_scale = false`)
/// mapping `src` onto `dst`.
///
/// Closed-form SVD solution of `min Σ w_i ||dst_i - (s R src_i + t)||²` with
/// the determinant sign correction, so the rotation is always proper.
pub fn fit_similarity(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
    with_scale: bool,
) -> Result<Similarity, RegistrationError> {
    if src.len() != dst.len() {
        return Err(RegistrationError::LengthMismatch(src.len(), dst.len()));
    }
    let uniform = vec![1.0; src.len()];
    let w = weights.unwrap_or(&uniform);
    if w.len() != src.len() {
        return Err(RegistrationError::LengthMismatch(w.len(), src.len()));
    }

    let wsum: f64 = w.iter().sum();
    let active = w.iter().filter(|&&wi| wi > 0.0).count();
    if active < 3 || wsum <= 0.0 {
        return Err(RegistrationError::TooFewPoints {
            needed: 3,
            got: active,
        });
    }

    let mut mean_src = Vector3::zeros();
    let mut mean_dst = Vector3::zeros();
    for i in 0..src.len() {
        mean_src += w[i] * src[i];
        mean_dst += w[i] * dst[i];
    }
    mean_src /= wsum;
    mean_dst /= wsum;

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for i in 0..src.len() {
        if w[i] == 0.0 {
            continue;
        }
        let s = src[i] - mean_src;
        let d = dst[i] - mean_dst;
        cov += w[i] * (d * s.transpose());
        var_src += w[i] * s.norm_squared();
    }
    cov /= wsum;
    var_src /= wsum;
    if var_src <= 1e-24 {
        return Err(RegistrationError::Degenerate("source points coincide"));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("3x3 svd");
    let vt = svd.v_t.expect("3x3 svd");
    let sv = svd.singular_values;
    // Rank >= 2 is required to pin the rotation.
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(RegistrationError::Degenerate(
            "covariance rank below 2 (collinear points)",
        ));
    }
    let mut sign = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let scale = if with_scale {
        let trace_ds = sv[0] * sign[(0, 0)] + sv[1] * sign[(1, 1)] + sv[2] * sign[(2, 2)];
        trace_ds / var_src
    } else {
        1.0
    };
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(RegistrationError::Degenerate("non-positive scale"));
    }
    let translation = mean_dst - scale * (rotation * mean_src);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Pose resection by object-space error minimization: recovers the
/// world-to-camera pose from world points and the pixel rays they must lie
/// on, starting from an initial guess (typically a neighboring camera).
///
/// Alternates the closed-form depth along each ray with a weighted rigid
/// registration onto the implied camera points. Each step is optimal for its
/// block, so the point-to-ray residual is non-increasing; on noise-free data
/// the iteration reaches the exact pose. Unlike a linear 12-parameter
/// resection this keeps working when the points are dominated by a single
/// plane.
pub fn resect_point_to_ray(
    world: &[Vector3<f64>],
    rays: &[Vector3<f64>],
    weights: &[f64],
    init: &Pose,
    iterations: usize,
) -> Result<Pose, RegistrationError> {
    if world.len() != rays.len() || world.len() != weights.len() {
        return Err(RegistrationError::LengthMismatch(world.len(), rays.len()));
    }
    let active = weights.iter().filter(|&&w| w > 0.0).count();
    if active < 3 {
        return Err(RegistrationError::TooFewPoints {
            needed: 3,
            got: active,
        });
    }

    let mut pose = *init;
    let mut targets = vec![Vector3::zeros(); world.len()];
    for _ in 0..iterations {
        for i in 0..world.len() {
            if weights[i] <= 0.0 {
                continue;
            }
            let cam = pose.apply(&world[i]);
            let depth = (cam.dot(&rays[i]) / rays[i].norm_squared()).max(1e-9);
            targets[i] = rays[i] * depth;
        }
        let rigid = fit_similarity(world, &targets, Some(weights), false)?;
        let next = Pose::new(rigid.rotation, rigid.translation);
        let moved = (next.rotation - pose.rotation).norm()
            + (next.translation - pose.translation).norm();
        pose = next;
        if moved < 1e-14 {
            break;
        }
    }
    Ok(pose)
}
