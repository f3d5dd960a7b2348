//! Novel-pose sampling along the training trajectory.
//!
//! Camera centers are threaded with a clamped uniform B-spline (cubic when
//! enough control points exist) so the curve interpolates the first and last
//! centers; orientations are spherically interpolated between the bracketing
//! training rotations. Each consecutive training pair contributes the same
//! number of interior samples, and every sample remembers its nearest
//! training view as the warp source.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::pose::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("need at least 2 training poses, got {0}")]
    TooFewPoses(usize),
    #[error("samples per segment must be at least 1")]
    NoSamples,
}

/// Sampled novel poses plus, per pose, the index of the training view whose
/// center is nearest (the warp source).
#[derive(Debug, Clone)]
pub struct NovelPoseSet {
    pub poses: Vec<Pose>,
    pub source_views: Vec<usize>,
}

/// Clamped uniform knot vector for `n` control points of degree `p`,
/// spanning `[0, n - p]`.
fn clamped_knots(n: usize, p: usize) -> Vec<f64> {
    let mut knots = Vec::with_capacity(n + p + 1);
    for _ in 0..=p {
        knots.push(0.0);
    }
    for i in 1..n - p {
        knots.push(i as f64);
    }
    for _ in 0..=p {
        knots.push((n - p) as f64);
    }
    knots
}

/// De Boor evaluation returning the control-point weights at `t`, which are
/// non-negative and sum to one (the convex-combination certificate).
fn bspline_weights(n: usize, degree: usize, knots: &[f64], t: f64) -> Vec<f64> {
    let domain_end = knots[n];
    let t = t.clamp(0.0, domain_end);
    // Knot span index: largest k with knots[k] <= t (and k < n).
    let mut span = degree;
    while span + 1 < n && knots[span + 1] <= t {
        span += 1;
    }
    // Cox-de Boor basis on the active window.
    let mut basis = vec![0.0; degree + 1];
    basis[0] = 1.0;
    for d in 1..=degree {
        let mut saved = 0.0;
        for r in 0..d {
            let i = span - d + 1 + r;
            let left = knots[i + d] - knots[i];
            let term = if left > 0.0 { basis[r] / left } else { 0.0 };
            basis[r] = saved + (knots[i + d] - t) * term;
            saved = (t - knots[i]) * term;
        }
        basis[d] = saved;
    }
    let mut weights = vec![0.0; n];
    for (r, &b) in basis.iter().enumerate() {
        weights[span - degree + r] = b;
    }
    weights
}

fn spline_point(centers: &[Vector3<f64>], degree: usize, knots: &[f64], t: f64) -> Vector3<f64> {
    let weights = bspline_weights(centers.len(), degree, knots, t);
    let mut p = Vector3::zeros();
    for (c, w) in centers.iter().zip(&weights) {
        p += *w * c;
    }
    p
}

/// Shortest-path spherical interpolation between two rotations.
fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let qa = a.quaternion().coords;
    let mut qb = b.quaternion().coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let dot = dot.min(1.0);
    let coords = if dot > 1.0 - 1e-10 {
        // Nearly identical rotations: normalized linear interpolation.
        (qa * (1.0 - t) + qb * t).normalize()
    } else {
        let theta = dot.acos();
        let sin_theta = theta.sin();
        (qa * ((1.0 - t) * theta).sin() + qb * (t * theta).sin()) / sin_theta
    };
    UnitQuaternion::from_quaternion(Quaternion::from_vector(coords))
}

/// Samples `samples_per_segment * (N - 1)` unseen poses between the ordered
/// training views.
///
/// Segment `i` is sampled at the interior parameters `i + j / (K + 1)` for
/// `j = 1..=K`, mapped uniformly onto the spline domain, so no sample
/// coincides with a training pose.
pub fn sample_novel_poses(
    training_poses: &[Pose],
    samples_per_segment: usize,
) -> Result<NovelPoseSet, SplineError> {
    let n = training_poses.len();
    if n < 2 {
        return Err(SplineError::TooFewPoses(n));
    }
    if samples_per_segment == 0 {
        return Err(SplineError::NoSamples);
    }

    let centers: Vec<Vector3<f64>> = training_poses.iter().map(|p| p.camera_center()).collect();
    let rotations: Vec<UnitQuaternion<f64>> = training_poses
        .iter()
        .map(|p| UnitQuaternion::from_matrix(&p.rotation))
        .collect();
    let degree = 3.min(n - 1);
    let knots = clamped_knots(n, degree);
    let domain_end = (n - degree) as f64;

    let mut poses = Vec::with_capacity(samples_per_segment * (n - 1));
    let mut source_views = Vec::with_capacity(samples_per_segment * (n - 1));
    for segment in 0..n - 1 {
        for j in 1..=samples_per_segment {
            let gamma = segment as f64 + j as f64 / (samples_per_segment + 1) as f64;
            let t = gamma * domain_end / (n - 1) as f64;
            let center = spline_point(&centers, degree, &knots, t);
            let u = gamma - segment as f64;
            let rotation = slerp(&rotations[segment], &rotations[segment + 1], u)
                .to_rotation_matrix()
                .into_inner();
            let translation = -(rotation * center);
            poses.push(Pose::new(rotation, translation));

            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let d = (c - center).norm();
                if d < best_dist {
                    best_dist = d;
                    best = k;
                }
            }
            source_views.push(best);
        }
    }
    Ok(NovelPoseSet {
        poses,
        source_views,
    })
}
