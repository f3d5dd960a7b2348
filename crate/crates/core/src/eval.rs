//! Evaluation: trajectory alignment and pose error, image quality metrics,
//! and photometric localization of test views against a frozen scene model.

use nalgebra::Vector3;
use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::grid::ColorImage;
use crate::loss::{loss_rgb, ssim_mean, LossError};
use crate::pose::{Pose, Twist};
use crate::registration::{fit_similarity, RegistrationError, Similarity};
use crate::splat::{render_with_gradients, Adjoints, GaussianCloud, RenderOptions};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("trajectories have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} poses")]
    TooFewPoses(usize),
    #[error("degenerate trajectory: {0}")]
    Degenerate(&'static str),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Ordered camera-to-world poses (timestamps implicit in the order).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(camera_to_world: Vec<Pose>) -> Self {
        Self {
            poses: camera_to_world,
        }
    }

    /// Builds from the pipeline's world-to-camera convention.
    pub fn from_world_to_camera(poses: &[Pose]) -> Self {
        Self {
            poses: poses.iter().map(Pose::inverse).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }
}

/// Pose-estimation errors after similarity alignment: center RMSE, relative
/// translation error (scaled by 100) and relative rotation error in degrees,
/// both RMSE over consecutive pairs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseMetrics {
    pub ate_rmse: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
}

/// Closed-form least-squares similarity aligning the estimated camera
/// centers onto the ground truth. Two poses are allowed (scale and the
/// minimal rotation are fixed by the pair); three or more need non-collinear
/// centers.
pub fn umeyama_align(est: &Trajectory, gt: &Trajectory) -> Result<Similarity, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    if est.len() < 2 {
        return Err(EvalError::TooFewPoses(2));
    }
    let e = est.centers();
    let g = gt.centers();
    if est.len() == 2 {
        return two_point_similarity(&e, &g);
    }
    Ok(fit_similarity(&e, &g, None, true)?)
}

fn two_point_similarity(
    e: &[Vector3<f64>],
    g: &[Vector3<f64>],
) -> Result<Similarity, EvalError> {
    let de = e[1] - e[0];
    let dg = g[1] - g[0];
    let ne = de.norm();
    let ng = dg.norm();
    if ne <= 1e-15 || ng <= 1e-15 {
        return Err(EvalError::Degenerate("coincident centers"));
    }
    let scale = ng / ne;
    let u = de / ne;
    let v = dg / ng;
    // Minimal rotation taking u to v; the roll about the axis is undetermined
    // by two points and fixed to zero.
    let axis = u.cross(&v);
    let rotation = if axis.norm() < 1e-12 {
        if u.dot(&v) > 0.0 {
            nalgebra::Matrix3::identity()
        } else {
            // Antiparallel: rotate by pi about a deterministic perpendicular.
            let helper = if u.x.abs() < 0.9 {
                Vector3::new(1.0, 0.0, 0.0)
            } else {
                Vector3::new(0.0, 1.0, 0.0)
            };
            let perp = u.cross(&helper).normalize();
            Twist {
                rotation: perp * std::f64::consts::PI,
                translation: Vector3::zeros(),
            }
            .exp()
            .rotation
        }
    } else {
        let angle = u.dot(&v).clamp(-1.0, 1.0).acos();
        Twist {
            rotation: axis.normalize() * angle,
            translation: Vector3::zeros(),
        }
        .exp()
        .rotation
    };
    let mean_e = 0.5 * (e[0] + e[1]);
    let mean_g = 0.5 * (g[0] + g[1]);
    Ok(Similarity {
        scale,
        rotation,
        translation: mean_g - scale * (rotation * mean_e),
    })
}

/// ATE (center RMSE after Umeyama alignment) and RPE over consecutive pairs,
/// with the estimated translations brought to ground-truth scale first.
pub fn pose_metrics(est: &Trajectory, gt: &Trajectory) -> Result<PoseMetrics, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    if est.len() < 2 {
        return Err(EvalError::TooFewPoses(2));
    }
    let sim = umeyama_align(est, gt)?;

    let mut ate_sq = 0.0;
    for (e, g) in est.centers().iter().zip(gt.centers()) {
        ate_sq += (sim.apply(e) - g).norm_squared();
    }
    let ate_rmse = (ate_sq / est.len() as f64).sqrt();

    // Scale-corrected relative poses.
    let scaled = |p: &Pose| Pose::new(p.rotation, p.translation * sim.scale);
    let mut t_sq = 0.0;
    let mut r_sq = 0.0;
    let pairs = est.len() - 1;
    for i in 0..pairs {
        let rel_est = Pose::compose(&scaled(&est.poses[i]).inverse(), &scaled(&est.poses[i + 1]));
        let rel_gt = Pose::compose(&gt.poses[i].inverse(), &gt.poses[i + 1]);
        let err = Pose::compose(&rel_gt.inverse(), &rel_est);
        t_sq += err.translation.norm_squared();
        let angle = err.log().rotation.norm();
        r_sq += angle * angle;
    }
    Ok(PoseMetrics {
        ate_rmse,
        rpe_trans: 100.0 * (t_sq / pairs as f64).sqrt(),
        rpe_rot: (r_sq / pairs as f64).sqrt().to_degrees(),
    })
}

/// Peak signal-to-noise ratio on the unit range; identical images give
/// positive infinity.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64, EvalError> {
    if !a.same_shape(b) {
        return Err(EvalError::LengthMismatch(
            a.width() * a.height(),
            b.width() * b.height(),
        ));
    }
    let mut mse = 0.0;
    for (pa, pb) in a.pixels().iter().zip(b.pixels()) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            mse += d * d;
        }
    }
    mse /= (a.width() * a.height() * 3) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean structural similarity with the same window and constants as the
/// training loss.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64, EvalError> {
    Ok(ssim_mean(a, b)?)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub steps: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// Structural mix of the photometric objective.
    pub lambda: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            lr_final: 1e-4,
            lambda: 0.1,
        }
    }
}

/// Photometric localization: gradient descent on a left-multiplied se(3)
/// perturbation of `init`, cloud frozen. Returns the pose with the lowest
/// loss seen over the run (the initial pose included), so the result never
/// regresses below the best iterate.
pub fn localize_test_view(
    cloud: &GaussianCloud,
    image: &ColorImage,
    init: &Pose,
    intrinsics: &CameraIntrinsics,
    options: &RenderOptions,
    config: &LocalizeConfig,
) -> Result<Pose, EvalError> {
    let mut current = *init;
    let mut best_pose = *init;
    let mut best_loss = f64::INFINITY;
    let mut adam_m = [0.0f64; 6];
    let mut adam_v = [0.0f64; 6];
    let zeros = vec![0.0; intrinsics.width * intrinsics.height];

    for step in 0..config.steps {
        let progress = step as f64 / config.steps.max(1) as f64;
        let lr = config.lr * (config.lr_final / config.lr).powf(progress);

        let forward = crate::splat::render(cloud, &current, intrinsics, options);
        let rgb = loss_rgb(&forward.color, image, config.lambda)?;
        if rgb.value.is_finite() && rgb.value < best_loss {
            best_loss = rgb.value;
            best_pose = current;
        }
        if !rgb.value.is_finite() {
            break;
        }
        let (_, _, pose_grad) = render_with_gradients(
            cloud,
            &current,
            intrinsics,
            options,
            &Adjoints {
                color: &rgb.gradient,
                depth: &zeros,
                alpha: None,
            },
        );
        let t = step as i32 + 1;
        let mut delta = [0.0f64; 6];
        for k in 0..6 {
            adam_m[k] = 0.9 * adam_m[k] + 0.1 * pose_grad[k];
            adam_v[k] = 0.999 * adam_v[k] + 0.001 * pose_grad[k] * pose_grad[k];
            let m_hat = adam_m[k] / (1.0 - 0.9f64.powi(t));
            let v_hat = adam_v[k] / (1.0 - 0.999f64.powi(t));
            delta[k] = -lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
        current = current.perturbed(&Twist::from_array(delta));
    }

    // Final candidate evaluated too, in case the last step improved.
    if config.steps > 0 {
        let forward = crate::splat::render(cloud, &current, intrinsics, options);
        let rgb = loss_rgb(&forward.color, image, config.lambda)?;
        if rgb.value.is_finite() && rgb.value < best_loss {
            best_pose = current;
        }
    }
    Ok(best_pose)
}
