//! Reverse-mode gradients through the splat compositing.
//!
//! The compositing is replayed per pixel: a first sweep recomputes the full
//! color/depth/alpha sums, a second front-to-back sweep peels off each
//! splat's transmittance-weighted contribution and distributes the upstream
//! adjoints onto alpha, color and depth. The per-splat image-space gradients
//! are then pulled back through the covariance projection, the quaternion
//! and scale factors, the world position, and a left-multiplied se(3)
//! perturbation of the camera pose.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::camera::CameraIntrinsics;
use crate::grid::{ColorImage, ScalarMap, DEPTH_SENTINEL};
use crate::pose::Pose;

use super::render::{
    bin_splats, kernel, kernel_derivative, prepare, projection_jacobian, quat_to_matrix, Splat,
    Q2_CUTOFF,
};
use super::{CloudGradients, GaussianCloud, RenderOptions, RenderOutput};

/// Per-pixel upstream adjoints. Depth adjoints address the raw depth
/// composite (callers must zero them where the rendered depth is the
/// sentinel); the alpha adjoint is optional.
pub struct Adjoints<'a> {
    pub color: &'a [[f64; 3]],
    pub depth: &'a [f64],
    pub alpha: Option<&'a [f64]>,
}

/// Renders and backpropagates in one pass.
///
/// Returns the render, per-Gaussian gradients for every cloud field, and the
/// 6-vector gradient `[rotation, translation]` of a left-multiplied se(3)
/// pose perturbation evaluated at zero.
pub fn render_with_gradients(
    cloud: &GaussianCloud,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    options: &RenderOptions,
    adjoints: &Adjoints,
) -> (RenderOutput, CloudGradients, [f64; 6]) {
    let (w, h) = (intrinsics.width, intrinsics.height);
    assert_eq!(adjoints.color.len(), w * h, "color adjoint size");
    assert_eq!(adjoints.depth.len(), w * h, "depth adjoint size");
    if let Some(a) = adjoints.alpha {
        assert_eq!(a.len(), w * h, "alpha adjoint size");
    }
    assert!(
        !options.normalize_depth,
        "gradients are defined for the raw depth composite"
    );

    let splats = prepare(cloud, pose, intrinsics, options);
    let lists = bin_splats(&splats, w, h);

    let mut color = vec![[0.0f64; 3]; w * h];
    let mut depth = vec![DEPTH_SENTINEL; w * h];
    let mut alpha = vec![0.0f64; w * h];

    // Image-space gradient accumulators, per splat.
    let n_splats = splats.len();
    let mut g_color = vec![[0.0f64; 3]; n_splats];
    let mut g_z = vec![0.0f64; n_splats];
    let mut g_center = vec![[0.0f64; 2]; n_splats];
    let mut g_inv = vec![[0.0f64; 3]; n_splats];
    let mut g_logit = vec![0.0f64; n_splats];

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

            // Pass 1: totals.
            let mut total_color = [0.0f64; 3];
            let mut total_depth = 0.0;
            let mut total_alpha = 0.0;
            let mut transmittance = 1.0;
            for &si in &lists.entries[begin..end] {
                let s = &splats[si as usize];
                let Some((a, _)) = splat_alpha(s, px, py, options) else {
                    continue;
                };
                let weight = a * transmittance;
                for c in 0..3 {
                    total_color[c] += s.color[c] * weight;
                }
                total_depth += s.mean_cam.z * weight;
                total_alpha += weight;
                transmittance *= 1.0 - a;
            }
            color[idx] = total_color;
            alpha[idx] = total_alpha;
            if total_alpha > options.min_alpha {
                depth[idx] = total_depth;
            }

            let adj_c = adjoints.color[idx];
            let adj_d = adjoints.depth[idx];
            let adj_a = adjoints.alpha.map_or(0.0, |a| a[idx]);
            if adj_c == [0.0; 3] && adj_d == 0.0 && adj_a == 0.0 {
                continue;
            }

            // Pass 2: peel contributions front to back.
            let mut acc_color = [0.0f64; 3];
            let mut acc_depth = 0.0;
            let mut acc_alpha = 0.0;
            let mut transmittance = 1.0;
            for &si in &lists.entries[begin..end] {
                let s = &splats[si as usize];
                let Some((a, chain)) = splat_alpha(s, px, py, options) else {
                    continue;
                };
                let weight = a * transmittance;
                let gi = si as usize;

                for c in 0..3 {
                    g_color[gi][c] += adj_c[c] * weight;
                }
                g_z[gi] += adj_d * weight;

                // d(loss)/d(alpha_i): own contribution appears with T_i, all
                // later ones shrink by the (1 - alpha_i) factor.
                let keep = 1.0 - a;
                let mut d_alpha = 0.0;
                for c in 0..3 {
                    let after = total_color[c] - acc_color[c] - s.color[c] * weight;
                    d_alpha += adj_c[c] * (s.color[c] * transmittance - after / keep);
                }
                let after_depth = total_depth - acc_depth - s.mean_cam.z * weight;
                d_alpha += adj_d * (s.mean_cam.z * transmittance - after_depth / keep);
                let after_alpha = total_alpha - acc_alpha - weight;
                d_alpha += adj_a * (transmittance - after_alpha / keep);

                if let Some((q2, dx, dy)) = chain {
                    let k = kernel(q2);
                    g_logit[gi] += d_alpha * k * s.opacity * (1.0 - s.opacity);
                    let dq2 = d_alpha * s.opacity * kernel_derivative(q2);
                    let gx = s.inv_cov[0] * dx + s.inv_cov[1] * dy;
                    let gy = s.inv_cov[1] * dx + s.inv_cov[2] * dy;
                    g_center[gi][0] -= dq2 * 2.0 * gx;
                    g_center[gi][1] -= dq2 * 2.0 * gy;
                    g_inv[gi][0] += dq2 * dx * dx;
                    g_inv[gi][1] += dq2 * 2.0 * dx * dy;
                    g_inv[gi][2] += dq2 * dy * dy;
                }

                for c in 0..3 {
                    acc_color[c] += s.color[c] * weight;
                }
                acc_depth += s.mean_cam.z * weight;
                acc_alpha += weight;
                transmittance *= keep;
            }
        }
    }

    // Pull image-space gradients back to the Gaussian parameters and pose.
    let mut grads = CloudGradients::zeros(cloud.len());
    let mut pose_rot = Vector3::zeros();
    let mut pose_trans = Vector3::zeros();
    let f = intrinsics.focal;
    let w_rot = pose.rotation;

    for (si, s) in splats.iter().enumerate() {
        let i = s.index;
        grads.colors[i] = g_color[si];
        grads.opacity_logits[i] = g_logit[si];

        let scales = cloud.log_scales[i].map(f64::exp);
        let rot_g = quat_to_matrix(&s.quat_unit);
        let p_mat = w_rot * rot_g;
        let mut a_mat = p_mat;
        for c in 0..3 {
            a_mat.column_mut(c).scale_mut(scales[c]);
        }
        let j = projection_jacobian(f, &s.mean_cam);
        let b = j * a_mat;

        // Inverse-covariance adjoint back to the 2D covariance.
        let inv = Matrix2::new(s.inv_cov[0], s.inv_cov[1], s.inv_cov[1], s.inv_cov[2]);
        let g_inv_mat = Matrix2::new(
            g_inv[si][0],
            0.5 * g_inv[si][1],
            0.5 * g_inv[si][1],
            g_inv[si][2],
        );
        let g_sigma2 = -(inv * g_inv_mat * inv);

        let g_b: Matrix2x3<f64> = 2.0 * g_sigma2 * b;
        let g_j: Matrix2x3<f64> = g_b * a_mat.transpose();
        let g_a: Matrix3<f64> = j.transpose() * g_b;

        // A = P * diag(s): scale and rotation-product factors.
        let mut g_p = g_a;
        for c in 0..3 {
            g_p.column_mut(c).scale_mut(scales[c]);
            let ds = p_mat.column(c).dot(&g_a.column(c));
            grads.log_scales[i][c] = ds * scales[c];
        }
        let g_rot_g = w_rot.transpose() * g_p;
        let g_w_cov = g_p * rot_g.transpose();

        // Quaternion through the rotation entries and the normalization.
        let qu = s.quat_unit;
        let mut g_q_unit = [0.0f64; 4];
        for (k, partial) in quat_rotation_partials(&qu).iter().enumerate() {
            g_q_unit[k] = g_rot_g.component_mul(partial).sum();
        }
        let dot: f64 = (0..4).map(|k| g_q_unit[k] * qu[k]).sum();
        for k in 0..4 {
            grads.orientations[i][k] = (g_q_unit[k] - dot * qu[k]) / s.quat_norm;
        }

        // Camera-frame mean gradient: projected center, Jacobian entries and
        // the depth composite.
        let (x, y, z) = (s.mean_cam.x, s.mean_cam.y, s.mean_cam.z);
        let fz2 = f / (z * z);
        let mut g_mu = Vector3::new(
            g_center[si][0] * f / z - g_j[(0, 2)] * fz2,
            g_center[si][1] * f / z - g_j[(1, 2)] * fz2,
            -g_center[si][0] * f * x / (z * z) - g_center[si][1] * f * y / (z * z)
                - (g_j[(0, 0)] + g_j[(1, 1)]) * fz2
                + g_j[(0, 2)] * 2.0 * f * x / (z * z * z)
                + g_j[(1, 2)] * 2.0 * f * y / (z * z * z),
        );
        g_mu.z += g_z[si];

        grads.positions[i] = w_rot.transpose() * g_mu;

        // Left-multiplied pose perturbation: the mean path plus the rotation
        // appearing in the covariance propagation.
        pose_trans += g_mu;
        pose_rot += s.mean_cam.cross(&g_mu);
        let m = g_w_cov * w_rot.transpose();
        pose_rot.x += m[(2, 1)] - m[(1, 2)];
        pose_rot.y += m[(0, 2)] - m[(2, 0)];
        pose_rot.z += m[(1, 0)] - m[(0, 1)];
    }

    let output = RenderOutput {
        color: ColorImage::from_data(w, h, color).expect("composited color is bounded"),
        depth: ScalarMap::from_values(w, h, depth).expect("grid shape"),
        alpha: ScalarMap::from_values(w, h, alpha).expect("grid shape"),
    };
    let pose_grad = [
        pose_rot.x, pose_rot.y, pose_rot.z, pose_trans.x, pose_trans.y, pose_trans.z,
    ];
    (output, grads, pose_grad)
}

/// Alpha of a splat at a pixel. Returns the chain data `(q2, dx, dy)` unless
/// the alpha cap clipped the value (no gradient flows through the cap).
#[inline]
fn splat_alpha(
    s: &Splat,
    px: f64,
    py: f64,
    options: &RenderOptions,
) -> Option<(f64, Option<(f64, f64, f64)>)> {
    let dx = px - s.pixel[0];
    let dy = py - s.pixel[1];
    let q2 = s.inv_cov[0] * dx * dx + 2.0 * s.inv_cov[1] * dx * dy + s.inv_cov[2] * dy * dy;
    if q2 >= Q2_CUTOFF {
        return None;
    }
    let raw = s.opacity * kernel(q2);
    if raw > options.alpha_cap {
        Some((options.alpha_cap, None))
    } else {
        Some((raw, Some((q2, dx, dy))))
    }
}

/// Partial derivatives of the rotation matrix with respect to the unit
/// quaternion components `[w, x, y, z]`.
fn quat_rotation_partials(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    [
        2.0 * Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0),
        2.0 * Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x),
        2.0 * Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y),
        2.0 * Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Twist;
    use crate::splat::render;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) struct Scene {
        pub cloud: GaussianCloud,
        pub pose: Pose,
        pub intr: CameraIntrinsics,
        pub adj_color: Vec<[f64; 3]>,
        pub adj_depth: Vec<f64>,
        pub adj_alpha: Vec<f64>,
    }

    /// Random scene with z-gaps large enough that finite-difference probes
    /// never reorder the compositing.
    pub(crate) fn random_scene(seed: u64, n: usize, size: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intr = CameraIntrinsics::new(size as f64 * 0.9, size, size).unwrap();
        let mut cloud = GaussianCloud {
            positions: vec![],
            log_scales: vec![],
            orientations: vec![],
            opacity_logits: vec![],
            colors: vec![],
        };
        for i in 0..n {
            let z = 2.0 + 0.2 * i as f64 + rng.gen_range(0.0..0.08);
            let span = 0.5 * z / (size as f64 * 0.9) * size as f64;
            cloud.positions.push(Vector3::new(
                rng.gen_range(-span..span),
                rng.gen_range(-span..span),
                z,
            ));
            cloud
                .log_scales
                .push(Vector3::from_fn(|_, _| rng.gen_range(-3.0..-1.5)));
            let q: [f64; 4] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            cloud.orientations.push(q.map(|v| v / norm));
            cloud.opacity_logits.push(rng.gen_range(-1.5..1.5));
            cloud.colors.push([
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            ]);
        }
        let pose = Twist::from_array([
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.05..0.05),
        ])
        .exp();

        // Fixed random adjoints; depth adjoints only where alpha is safely
        // above the sentinel threshold.
        let out = render(&cloud, &pose, &intr, &RenderOptions::default());
        let px = size * size;
        let adj_color: Vec<[f64; 3]> = (0..px)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let adj_depth: Vec<f64> = (0..px)
            .map(|i| {
                if out.alpha.values()[i] > 0.01 {
                    rng.gen_range(-0.5..0.5)
                } else {
                    0.0
                }
            })
            .collect();
        let adj_alpha: Vec<f64> = (0..px).map(|_| rng.gen_range(-0.3..0.3)).collect();
        Scene {
            cloud,
            pose,
            intr,
            adj_color,
            adj_depth,
            adj_alpha,
        }
    }

    pub(crate) fn scene_loss(scene: &Scene, cloud: &GaussianCloud, pose: &Pose) -> f64 {
        let out = render(cloud, pose, &scene.intr, &RenderOptions::default());
        let mut loss = 0.0;
        for i in 0..scene.adj_color.len() {
            let px = out.color.pixels()[i];
            for c in 0..3 {
                loss += scene.adj_color[i][c] * px[c];
            }
            let d = out.depth.values()[i];
            if d.is_finite() {
                loss += scene.adj_depth[i] * d;
            }
            loss += scene.adj_alpha[i] * out.alpha.values()[i];
        }
        loss
    }

    fn check_param<FSet>(
        scene: &Scene,
        analytic: f64,
        grad_scale: f64,
        h: f64,
        mut set: FSet,
        label: &str,
    ) where
        FSet: FnMut(&mut GaussianCloud, f64),
    {
        let mut plus = scene.cloud.clone();
        set(&mut plus, h);
        let mut minus = scene.cloud.clone();
        set(&mut minus, -h);
        let fd = (scene_loss(scene, &plus, &scene.pose) - scene_loss(scene, &minus, &scene.pose))
            / (2.0 * h);
        let err = (fd - analytic).abs();
        let tol = (1e-3 * fd.abs().max(analytic.abs())).max(1e-7 * grad_scale.max(1e-9));
        assert!(
            err <= tol,
            "{label}: analytic {analytic:.9e} vs fd {fd:.9e} (err {err:.3e}, tol {tol:.3e})"
        );
    }

    #[test]
    fn zero_adjoints_give_zero_gradients() {
        let scene = random_scene(1, 6, 24);
        let zeros_c = vec![[0.0; 3]; 24 * 24];
        let zeros_d = vec![0.0; 24 * 24];
        let (_, grads, pose_grad) = render_with_gradients(
            &scene.cloud,
            &scene.pose,
            &scene.intr,
            &RenderOptions::default(),
            &Adjoints {
                color: &zeros_c,
                depth: &zeros_d,
                alpha: None,
            },
        );
        assert_eq!(grads.max_abs(), 0.0);
        assert_eq!(pose_grad, [0.0; 6]);
    }

    #[test]
    fn single_gaussian_color_gradient_equals_composited_weight() {
        // With a color adjoint of one at a single pixel, the color gradient
        // is exactly that pixel's composited weight alpha * T.
        let cloud = GaussianCloud {
            positions: vec![Vector3::new(0.0, 0.0, 2.0)],
            log_scales: vec![Vector3::from_element(0.1f64.ln())],
            orientations: vec![[1.0, 0.0, 0.0, 0.0]],
            opacity_logits: vec![0.8],
            colors: vec![[0.2, 0.5, 0.9]],
        };
        let intr = CameraIntrinsics::new(30.0, 32, 32).unwrap();
        let mut adj_color = vec![[0.0; 3]; 32 * 32];
        adj_color[16 * 32 + 16] = [1.0, 0.0, 0.0];
        let adj_depth = vec![0.0; 32 * 32];
        let (out, grads, _) = render_with_gradients(
            &cloud,
            &Pose::identity(),
            &intr,
            &RenderOptions::default(),
            &Adjoints {
                color: &adj_color,
                depth: &adj_depth,
                alpha: None,
            },
        );
        let weight = out.alpha.at(16, 16);
        assert!(weight > 0.1);
        assert!((grads.colors[0][0] - weight).abs() < 1e-12);
        assert_eq!(grads.colors[0][1], 0.0);

        // Cross-check against central differences.
        let h = 1e-4;
        let mut plus = cloud.clone();
        plus.colors[0][0] += h;
        let mut minus = cloud.clone();
        minus.colors[0][0] -= h;
        let eval = |c: &GaussianCloud| {
            render(c, &Pose::identity(), &intr, &RenderOptions::default())
                .color
                .at(16, 16)[0]
        };
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        assert!((fd - grads.colors[0][0]).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_central_differences_on_random_scenes() {
        for seed in 0..4 {
            let scene = random_scene(100 + seed, 10, 32);
            let (_, grads, pose_grad) = render_with_gradients(
                &scene.cloud,
                &scene.pose,
                &scene.intr,
                &RenderOptions::default(),
                &Adjoints {
                    color: &scene.adj_color,
                    depth: &scene.adj_depth,
                    alpha: Some(&scene.adj_alpha),
                },
            );
            let grad_scale = grads.max_abs().max(
                pose_grad
                    .iter()
                    .fold(0.0f64, |m, &v| m.max(v.abs())),
            );
            let h = 1e-4;
            for g in 0..scene.cloud.len() {
                for c in 0..3 {
                    check_param(
                        &scene,
                        grads.positions[g][c],
                        grad_scale,
                        h,
                        |cl, d| cl.positions[g][c] += d,
                        &format!("position[{g}][{c}]"),
                    );
                    check_param(
                        &scene,
                        grads.log_scales[g][c],
                        grad_scale,
                        h,
                        |cl, d| cl.log_scales[g][c] += d,
                        &format!("log_scale[{g}][{c}]"),
                    );
                    check_param(
                        &scene,
                        grads.colors[g][c],
                        grad_scale,
                        h,
                        |cl, d| cl.colors[g][c] += d,
                        &format!("color[{g}][{c}]"),
                    );
                }
                for c in 0..4 {
                    check_param(
                        &scene,
                        grads.orientations[g][c],
                        grad_scale,
                        h,
                        |cl, d| cl.orientations[g][c] += d,
                        &format!("orientation[{g}][{c}]"),
                    );
                }
                check_param(
                    &scene,
                    grads.opacity_logits[g],
                    grad_scale,
                    h,
                    |cl, d| cl.opacity_logits[g] += d,
                    &format!("opacity[{g}]"),
                );
            }
            // Pose 6-vector via left-multiplied exponential probes.
            let hp = 1e-5;
            for k in 0..6 {
                let mut arr = [0.0; 6];
                arr[k] = hp;
                let plus = scene.pose.perturbed(&Twist::from_array(arr));
                arr[k] = -hp;
                let minus = scene.pose.perturbed(&Twist::from_array(arr));
                let fd = (scene_loss(&scene, &scene.cloud, &plus)
                    - scene_loss(&scene, &scene.cloud, &minus))
                    / (2.0 * hp);
                let err = (fd - pose_grad[k]).abs();
                let tol = (1e-3 * fd.abs().max(pose_grad[k].abs())).max(1e-7 * grad_scale);
                assert!(
                    err <= tol,
                    "pose[{k}]: analytic {:.9e} vs fd {fd:.9e}",
                    pose_grad[k]
                );
            }
        }
    }

    #[test]
    fn pose_gradient_is_first_order_accurate() {
        // Rendering at exp(eps * delta) * pose must match the first-order
        // prediction to o(eps): the residual ratio between eps = 1e-3 and
        // eps = 1e-4 should be about 100 (second order).
        let scene = random_scene(7, 8, 24);
        let (_, _, pose_grad) = render_with_gradients(
            &scene.cloud,
            &scene.pose,
            &scene.intr,
            &RenderOptions::default(),
            &Adjoints {
                color: &scene.adj_color,
                depth: &scene.adj_depth,
                alpha: Some(&scene.adj_alpha),
            },
        );
        let delta = Twist::from_array([0.3, -0.5, 0.2, 0.4, 0.1, -0.2]);
        let directional: f64 = pose_grad
            .iter()
            .zip(delta.to_array().iter())
            .map(|(g, d)| g * d)
            .sum();
        let base = scene_loss(&scene, &scene.cloud, &scene.pose);
        let residual = |eps: f64| -> f64 {
            let arr = delta.to_array().map(|v| v * eps);
            let moved = scene.pose.perturbed(&Twist::from_array(arr));
            let value = scene_loss(&scene, &scene.cloud, &moved);
            (value - base - eps * directional).abs()
        };
        let r3 = residual(1e-3);
        let r4 = residual(1e-4);
        assert!(
            r3 > 20.0 * r4,
            "expected ~quadratic residual decay, got {r3:.3e} vs {r4:.3e}"
        );
    }
}
