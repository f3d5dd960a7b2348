//! Forward rasterization: projection, covariance propagation, front-to-back
//! alpha compositing.

use nalgebra::{Matrix3, Vector3};

use crate::camera::CameraIntrinsics;
use crate::grid::{ColorImage, ScalarMap, DEPTH_SENTINEL};
use crate::pose::Pose;

use super::{GaussianCloud, RenderOptions, RenderOutput};

/// Squared Mahalanobis cutoff (3 sigma).
pub(super) const Q2_CUTOFF: f64 = 9.0;

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub(super) fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// A Gaussian after projection, ready for compositing.
pub(super) struct Splat {
    pub index: usize,
    pub mean_cam: Vector3<f64>,
    pub pixel: [f64; 2],
    /// Inverse 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub inv_cov: [f64; 3],
    /// Unit quaternion actually used to build the rotation.
    pub quat_unit: [f64; 4],
    pub quat_norm: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Inclusive pixel bounds of the 3-sigma footprint.
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

/// Projects and sorts the cloud front to back (camera depth, then index).
pub(super) fn prepare(
    cloud: &GaussianCloud,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    options: &RenderOptions,
) -> Vec<Splat> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let f = intrinsics.focal;
    let mut splats = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let mean_cam = pose.apply(&cloud.positions[i]);
        let z = mean_cam.z;
        if z <= options.near {
            continue;
        }
        let q_raw = cloud.orientations[i];
        let quat_norm =
            (q_raw[0] * q_raw[0] + q_raw[1] * q_raw[1] + q_raw[2] * q_raw[2] + q_raw[3] * q_raw[3])
                .sqrt();
        if quat_norm <= 0.0 {
            continue;
        }
        let quat_unit = q_raw.map(|c| c / quat_norm);
        let rot = quat_to_matrix(&quat_unit);
        let scales = cloud.log_scales[i].map(f64::exp);

        // A = R_cw * R_g * diag(s); camera covariance is A * A^T.
        let mut a = pose.rotation * rot;
        for c in 0..3 {
            a.column_mut(c).scale_mut(scales[c]);
        }
        // First-order projection: B = J * A with J the 2x3 Jacobian of the
        // pinhole map at the camera-frame mean.
        let j = projection_jacobian(f, &mean_cam);
        let b = j * a;
        let ca = b.row(0).dot(&b.row(0));
        let cb = b.row(0).dot(&b.row(1));
        let cc = b.row(1).dot(&b.row(1));
        let det = ca * cc - cb * cb;
        if !(det > 1e-300) {
            continue;
        }
        let inv_cov = [cc / det, -cb / det, ca / det];

        let Some((pixel, _)) = intrinsics.project(&mean_cam).in_front() else {
            continue;
        };
        let lam_max = 0.5 * (ca + cc) + (0.25 * (ca - cc) * (ca - cc) + cb * cb).sqrt();
        let radius = 3.0 * lam_max.sqrt();
        let x0 = (pixel[0] - radius).floor().max(0.0);
        let x1 = (pixel[0] + radius).ceil().min((w - 1) as f64);
        let y0 = (pixel[1] - radius).floor().max(0.0);
        let y1 = (pixel[1] + radius).ceil().min((h - 1) as f64);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        splats.push(Splat {
            index: i,
            mean_cam,
            pixel,
            inv_cov,
            quat_unit,
            quat_norm,
            opacity: sigmoid(cloud.opacity_logits[i]),
            color: cloud.colors[i],
            x0: x0 as usize,
            x1: x1 as usize,
            y0: y0 as usize,
            y1: y1 as usize,
        });
    }
    splats.sort_by(|a, b| a.mean_cam.z.total_cmp(&b.mean_cam.z).then(a.index.cmp(&b.index)));
    splats
}

pub(super) fn projection_jacobian(f: f64, mean: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let z = mean.z;
    nalgebra::Matrix2x3::new(
        f / z,
        0.0,
        -f * mean.x / (z * z),
        0.0,
        f / z,
        -f * mean.y / (z * z),
    )
}

pub(super) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-pixel splat lists in compositing order (CSR layout).
pub(super) struct PixelLists {
    pub offsets: Vec<u32>,
    pub entries: Vec<u32>,
}

pub(super) fn bin_splats(splats: &[Splat], w: usize, h: usize) -> PixelLists {
    let mut counts = vec![0u32; w * h + 1];
    for s in splats {
        for y in s.y0..=s.y1 {
            for x in s.x0..=s.x1 {
                counts[y * w + x + 1] += 1;
            }
        }
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let mut entries = vec![0u32; *counts.last().unwrap() as usize];
    let mut cursor = counts.clone();
    for (si, s) in splats.iter().enumerate() {
        for y in s.y0..=s.y1 {
            for x in s.x0..=s.x1 {
                let slot = &mut cursor[y * w + x];
                entries[*slot as usize] = si as u32;
                *slot += 1;
            }
        }
    }
    PixelLists {
        offsets: counts,
        entries,
    }
}

/// Normalized kernel: 1 at the center, reaching 0 with zero slope at the
/// 3-sigma cutoff, so a pixel entering or leaving the footprint causes no
/// jump in the value or the gradient.
#[inline]
pub(super) fn kernel(q2: f64) -> f64 {
    let floor = (-0.5 * Q2_CUTOFF).exp();
    let norm = 1.0 - floor * (1.0 + 0.5 * Q2_CUTOFF);
    ((-0.5 * q2).exp() - floor * (1.0 + 0.5 * (Q2_CUTOFF - q2))) / norm
}

#[inline]
pub(super) fn kernel_derivative(q2: f64) -> f64 {
    let floor = (-0.5 * Q2_CUTOFF).exp();
    let norm = 1.0 - floor * (1.0 + 0.5 * Q2_CUTOFF);
    0.5 * (floor - (-0.5 * q2).exp()) / norm
}

/// Renders color, expected depth and accumulated opacity. Deterministic for
/// fixed inputs; an empty cloud yields a black frame with zero alpha.
pub fn render(
    cloud: &GaussianCloud,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    options: &RenderOptions,
) -> RenderOutput {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let splats = prepare(cloud, pose, intrinsics, options);
    let lists = bin_splats(&splats, w, h);

    let mut color = vec![[0.0f64; 3]; w * h];
    let mut depth = vec![DEPTH_SENTINEL; w * h];
    let mut alpha = vec![0.0f64; w * h];

    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let begin = lists.offsets[idx] as usize;
            let end = lists.offsets[idx + 1] as usize;
            if begin == end {
                continue;
            }
            let px = x as f64;
            let py = y as f64;
            let mut transmittance = 1.0;
            let mut acc_color = [0.0; 3];
            let mut acc_depth = 0.0;
            let mut acc_alpha = 0.0;
            for &si in &lists.entries[begin..end] {
                let s = &splats[si as usize];
                let dx = px - s.pixel[0];
                let dy = py - s.pixel[1];
                let q2 = s.inv_cov[0] * dx * dx
                    + 2.0 * s.inv_cov[1] * dx * dy
                    + s.inv_cov[2] * dy * dy;
                if q2 >= Q2_CUTOFF {
                    continue;
                }
                let a = (s.opacity * kernel(q2)).min(options.alpha_cap);
                let weight = a * transmittance;
                for c in 0..3 {
                    acc_color[c] += s.color[c] * weight;
                }
                acc_depth += s.mean_cam.z * weight;
                acc_alpha += weight;
                transmittance *= 1.0 - a;
            }
            color[idx] = acc_color;
            alpha[idx] = acc_alpha;
            if acc_alpha > options.min_alpha {
                depth[idx] = if options.normalize_depth {
                    acc_depth / acc_alpha
                } else {
                    acc_depth
                };
            }
        }
    }

    RenderOutput {
        color: ColorImage::from_data(w, h, color).expect("composited color is finite and bounded"),
        depth: ScalarMap::from_values(w, h, depth).expect("grid shape"),
        alpha: ScalarMap::from_values(w, h, alpha).expect("grid shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_gaussian(z: f64, sigma: f64, opacity_logit: f64, color: [f64; 3]) -> GaussianCloud {
        GaussianCloud {
            positions: vec![Vector3::new(0.0, 0.0, z)],
            log_scales: vec![Vector3::from_element(sigma.ln())],
            orientations: vec![[1.0, 0.0, 0.0, 0.0]],
            opacity_logits: vec![opacity_logit],
            colors: vec![color],
        }
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cloud = GaussianCloud {
            positions: vec![],
            log_scales: vec![],
            orientations: vec![],
            opacity_logits: vec![],
            colors: vec![],
        };
        let intr = CameraIntrinsics::new(40.0, 32, 32).unwrap();
        let out = render(&cloud, &Pose::identity(), &intr, &RenderOptions::default());
        assert!(out.color.pixels().iter().all(|p| *p == [0.0, 0.0, 0.0]));
        assert!(out.alpha.values().iter().all(|&a| a == 0.0));
        assert!(out.depth.values().iter().all(|d| d.is_nan()));
    }

    #[test]
    fn opaque_gaussian_peaks_at_principal_point_with_its_depth() {
        // Logit 9 puts the opacity at ~0.99988; the 32-wide image places the
        // principal point exactly on pixel (16, 16).
        let cloud = single_gaussian(2.0, 0.01, 9.0, [1.0, 1.0, 1.0]);
        let intr = CameraIntrinsics::new(40.0, 32, 32).unwrap();
        let out = render(&cloud, &Pose::identity(), &intr, &RenderOptions::default());
        let mut best = (0usize, 0usize, -1.0f64);
        for y in 0..32 {
            for x in 0..32 {
                let v = out.color.at(x, y)[0];
                if v > best.2 {
                    best = (x, y, v);
                }
            }
        }
        assert_eq!((best.0, best.1), (16, 16));
        let d = out.depth.at(16, 16);
        assert!((d - 2.0).abs() < 1e-3, "composited depth {d}");
        assert!(out.alpha.at(16, 16) > 0.999);
    }

    #[test]
    fn front_gaussian_occludes_back_gaussian() {
        let cloud = GaussianCloud {
            positions: vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 2.0)],
            log_scales: vec![Vector3::from_element(0.05f64.ln()); 2],
            orientations: vec![[1.0, 0.0, 0.0, 0.0]; 2],
            opacity_logits: vec![6.9, 6.9], // ~0.999
            colors: vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        };
        let intr = CameraIntrinsics::new(40.0, 32, 32).unwrap();
        let out = render(&cloud, &Pose::identity(), &intr, &RenderOptions::default());
        let px = out.color.at(16, 16);
        assert!(px[0] > 0.99, "front red dominates: {px:?}");
        assert!(px[2] < 0.01, "back blue occluded: {px:?}");
    }

    #[test]
    fn renders_are_bit_identical() {
        let mut cloud = single_gaussian(3.0, 0.2, 0.5, [0.3, 0.7, 0.2]);
        cloud.positions.push(Vector3::new(0.3, -0.2, 2.5));
        cloud.log_scales.push(Vector3::new(-2.0, -1.5, -2.5));
        cloud.orientations.push([0.9, 0.1, -0.3, 0.2]);
        cloud.opacity_logits.push(1.0);
        cloud.colors.push([0.9, 0.1, 0.4]);
        let intr = CameraIntrinsics::new(35.0, 48, 40).unwrap();
        let pose = crate::pose::Twist::from_array([0.02, -0.01, 0.03, 0.1, 0.0, -0.05]).exp();
        let a = render(&cloud, &pose, &intr, &RenderOptions::default());
        let b = render(&cloud, &pose, &intr, &RenderOptions::default());
        assert_eq!(a.color, b.color);
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(
            a.depth.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.depth.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn alpha_stays_in_unit_interval() {
        let mut cloud = GaussianCloud {
            positions: vec![],
            log_scales: vec![],
            orientations: vec![],
            opacity_logits: vec![],
            colors: vec![],
        };
        for i in 0..40 {
            let t = i as f64 * 0.61;
            cloud.positions.push(Vector3::new(
                0.4 * t.sin(),
                0.4 * t.cos(),
                2.0 + 0.05 * i as f64,
            ));
            cloud.log_scales.push(Vector3::from_element(-1.2));
            cloud.orientations.push([1.0, 0.0, 0.0, 0.0]);
            cloud.opacity_logits.push(3.0);
            cloud.colors.push([1.0, 1.0, 1.0]);
        }
        let intr = CameraIntrinsics::new(40.0, 32, 32).unwrap();
        let out = render(&cloud, &Pose::identity(), &intr, &RenderOptions::default());
        for (&a, px) in out.alpha.values().iter().zip(out.color.pixels()) {
            assert!((0.0..=1.0).contains(&a));
            for c in 0..3 {
                assert!(px[c] <= a + 1e-12);
            }
        }
    }
}
