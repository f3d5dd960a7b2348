//! Minimal differentiable anisotropic Gaussian splatting on the CPU.
//!
//! Gaussians carry a world position, per-axis log scale, a unit quaternion,
//! an opacity logit and a constant RGB color. Rendering projects them with
//! first-order covariance propagation, sorts front to back by camera depth
//! (ties broken by index, so renders are bit-reproducible) and
//! alpha-composites color, expected depth and accumulated opacity per pixel.
//! The backward pass produces analytic gradients for every Gaussian field and
//! for a left-multiplied se(3) perturbation of the camera pose.

mod backward;
mod render;

pub use backward::{render_with_gradients, Adjoints};
pub use render::render;

use nalgebra::Vector3;
use thiserror::Error;

use crate::grid::{ColorImage, ScalarMap};

#[derive(Debug, Error, PartialEq)]
pub enum SplatError {
    #[error("cannot initialize a Gaussian cloud from zero points")]
    NoPoints,
}

/// Scene model: one anisotropic Gaussian per entry, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    /// Unit quaternions as `[w, x, y, z]`; renormalized after every update.
    pub orientations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Renormalizes every quaternion; call after gradient updates.
    pub fn renormalize_orientations(&mut self) {
        for q in self.orientations.iter_mut() {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 {
                for c in q.iter_mut() {
                    *c /= n;
                }
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    pub fn max_quaternion_norm_error(&self) -> f64 {
        self.orientations
            .iter()
            .map(|q| {
                ((q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Rendered frame: color, alpha-composited expected depth (NaN sentinel where
/// the accumulated opacity is negligible) and the accumulated opacity itself.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ColorImage,
    pub depth: ScalarMap,
    pub alpha: ScalarMap,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Near-plane cull distance in camera units.
    pub near: f64,
    /// Hard ceiling on per-splat alpha, keeps transmittance positive.
    pub alpha_cap: f64,
    /// Accumulated opacity below which the depth output is the sentinel.
    pub min_alpha: f64,
    /// Divide the composited depth by the accumulated alpha. Off by default:
    /// the expected-depth composite is used as-is.
    pub normalize_depth: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            near: 0.01,
            alpha_cap: 0.9999,
            min_alpha: 1e-4,
            normalize_depth: false,
        }
    }
}

/// Gradients of a scalar loss with respect to every cloud field.
#[derive(Debug, Clone)]
pub struct CloudGradients {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub orientations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl CloudGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            orientations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for v in &self.positions {
            m = m.max(v.abs().max());
        }
        for v in &self.log_scales {
            m = m.max(v.abs().max());
        }
        for q in &self.orientations {
            for c in q {
                m = m.max(c.abs());
            }
        }
        for &o in &self.opacity_logits {
            m = m.max(o.abs());
        }
        for c in &self.colors {
            for v in c {
                m = m.max(v.abs());
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InitConfig {
    /// Cap on the Gaussian count; extra points are dropped by even striding.
    pub max_gaussians: Option<usize>,
    /// Initial opacity (pre-logit).
    pub initial_opacity: f64,
    /// Nearest neighbors used for the isotropic scale estimate.
    pub neighbors: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            max_gaussians: None,
            initial_opacity: 0.1,
            neighbors: 3,
        }
    }
}

/// One Gaussian per (optionally subsampled) input point: isotropic scale from
/// the mean distance to the nearest neighbors (truncated to however many
/// exist), identity orientation, uniform initial opacity.
pub fn init_from_points(
    points: &[(Vector3<f64>, [f64; 3])],
    config: &InitConfig,
) -> Result<GaussianCloud, SplatError> {
    if points.is_empty() {
        return Err(SplatError::NoPoints);
    }
    let selected: Vec<&(Vector3<f64>, [f64; 3])> = match config.max_gaussians {
        Some(cap) if cap > 0 && points.len() > cap => (0..cap)
            .map(|i| &points[i * points.len() / cap])
            .collect(),
        _ => points.iter().collect(),
    };

    let n = selected.len();
    let k = config.neighbors.min(n.saturating_sub(1));
    let mut log_scales = Vec::with_capacity(n);
    for (i, (p, _)) in selected.iter().enumerate() {
        let scale = if k == 0 {
            1.0
        } else {
            // Mean distance to the k nearest neighbors, brute force.
            let mut nearest = vec![f64::INFINITY; k];
            for (j, (q, _)) in selected.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm();
                if d < nearest[k - 1] {
                    let pos = nearest.partition_point(|&x| x < d);
                    nearest.insert(pos, d);
                    nearest.pop();
                }
            }
            nearest.iter().sum::<f64>() / k as f64
        };
        log_scales.push(Vector3::from_element(scale.max(1e-12).ln()));
    }

    let opacity = config.initial_opacity.clamp(1e-6, 1.0 - 1e-6);
    let logit = (opacity / (1.0 - opacity)).ln();
    Ok(GaussianCloud {
        positions: selected.iter().map(|(p, _)| *p).collect(),
        log_scales,
        orientations: vec![[1.0, 0.0, 0.0, 0.0]; n],
        opacity_logits: vec![logit; n],
        colors: selected
            .iter()
            .map(|(_, c)| c.map(|v| v.clamp(0.0, 1.0)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_cloud() {
        let cloud = init_from_points(
            &[(Vector3::new(1.0, 2.0, 3.0), [0.5, 0.25, 1.0])],
            &InitConfig::default(),
        )
        .unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.positions[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(cloud.orientations[0], [1.0, 0.0, 0.0, 0.0]);
        let op = 1.0 / (1.0 + (-cloud.opacity_logits[0]).exp());
        assert!((op - 0.1).abs() < 1e-12);
    }

    #[test]
    fn two_points_use_their_mutual_distance_as_scale() {
        let cloud = init_from_points(
            &[
                (Vector3::new(0.0, 0.0, 0.0), [1.0; 3]),
                (Vector3::new(1.0, 0.0, 0.0), [1.0; 3]),
            ],
            &InitConfig::default(),
        )
        .unwrap();
        for ls in &cloud.log_scales {
            assert!(ls.iter().all(|&v| v.abs() < 1e-12), "scale should be 1");
        }
    }

    #[test]
    fn subsample_cap_is_exact() {
        let points: Vec<(Vector3<f64>, [f64; 3])> = (0..10_000)
            .map(|i| {
                let t = i as f64 * 0.37;
                (Vector3::new(t.sin(), t.cos(), (0.1 * t).sin()), [0.5; 3])
            })
            .collect();
        let cloud = init_from_points(
            &points,
            &InitConfig {
                max_gaussians: Some(5000),
                ..InitConfig::default()
            },
        )
        .unwrap();
        assert_eq!(cloud.len(), 5000);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(
            init_from_points(&[], &InitConfig::default()),
            Err(SplatError::NoPoints)
        );
    }
}
