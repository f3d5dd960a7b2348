//! Synthetic scene oracle: analytic geometry rendered to images, exact (or
//! noise-injected) pairwise pointmaps with per-edge scales, ground-truth
//! derived mono depth passed through a configurable affine map in
//! inverse-depth space, and ground-truth poses for evaluation.
//!
//! Output is byte-deterministic for a fixed spec: same seed, same directory
//! contents.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsesplat_core::camera::CameraIntrinsics;
use sparsesplat_core::grid::{ColorImage, ScalarMap};
use sparsesplat_core::pose::Pose;
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::formats::{write_png, write_poses, FormatError};
use crate::pfm::{write_pfm, PfmError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Pfm(#[from] PfmError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SceneKind {
    /// Camera inside a textured box; full pipeline scenes.
    BoxRoom,
    /// Fronto-parallel textured plane.
    TexturedPlane,
    /// Independent random depths per view; alignment-only scenes.
    PointField,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub kind: SceneKind,
    pub n_views: usize,
    pub n_test_views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Pair grids are generated at this fraction of the image resolution.
    pub pair_scale: f64,
    /// Log-range of the per-edge pointmap scales (renormalized so their
    /// product is exactly one).
    pub edge_scale_spread: f64,
    /// Mono depth is generated as `(1/depth - mono_shift) / mono_scale`, so
    /// the affine inverse-depth alignment recovers exactly `(mono_scale,
    /// mono_shift)`.
    pub mono_scale: f64,
    pub mono_shift: f64,
    /// Additive uniform noise on pointmap coordinates.
    pub pointmap_noise: f64,
    /// Fraction of pair pixels whose depth is corrupted tenfold; their
    /// confidence drops to 0.01.
    pub corrupt_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::BoxRoom,
            n_views: 3,
            n_test_views: 2,
            width: 96,
            height: 72,
            focal: 86.0,
            pair_scale: 1.0,
            edge_scale_spread: 0.5,
            mono_scale: 2.0,
            mono_shift: 0.3,
            pointmap_noise: 0.0,
            corrupt_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Analytic scene geometry: every camera ray resolves to a depth (camera-z
/// units) and a surface color.
pub struct Geometry {
    kind: SceneKind,
    /// Per-view random depth grids for the point-field kind.
    field_depths: Vec<ScalarMap>,
    field_colors: Vec<usize>,
}

const BOX_HALF: [f64; 3] = [3.0, 2.2, 3.0];
const PLANE_Z: f64 = 5.0;

fn smooth3(u: f64, v: f64, phase: f64) -> [f64; 3] {
    [
        0.55 + 0.22 * (1.3 * u + phase).sin() + 0.1 * (0.7 * v - phase).cos(),
        0.5 + 0.2 * (1.1 * v + 2.0 * phase).sin() + 0.12 * (0.9 * u).cos(),
        0.45 + 0.18 * (0.8 * (u + v) - phase).sin() + 0.1 * (1.7 * u).sin(),
    ]
}

impl Geometry {
    fn new(spec: &SynthSpec) -> Self {
        let mut field_depths = Vec::new();
        if spec.kind == SceneKind::PointField {
            for v in 0..spec.n_views + spec.n_test_views {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(1000 + v as u64);
                field_depths.push(ScalarMap::from_fn(spec.width, spec.height, |_, _| {
                    rng.gen_range(3.0..6.0)
                }));
            }
        }
        Self {
            kind: spec.kind,
            field_depths,
            field_colors: (0..spec.n_views + spec.n_test_views).collect(),
        }
    }

    /// Depth (in camera-z units, ray direction normalized to unit z) and
    /// color along a world ray.
    fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, [f64; 3]) {
        match self.kind {
            SceneKind::BoxRoom => {
                let mut t_exit = f64::INFINITY;
                let mut axis = 0usize;
                for k in 0..3 {
                    let d = dir[k];
                    if d.abs() < 1e-12 {
                        continue;
                    }
                    let bound = if d > 0.0 { BOX_HALF[k] } else { -BOX_HALF[k] };
                    let t = (bound - origin[k]) / d;
                    if t > 0.0 && t < t_exit {
                        t_exit = t;
                        axis = k;
                    }
                }
                let hit = origin + t_exit * dir;
                let (u, v) = match axis {
                    0 => (hit.y, hit.z),
                    1 => (hit.x, hit.z),
                    _ => (hit.x, hit.y),
                };
                let wall_phase = axis as f64 * 2.1 + if dir[axis] > 0.0 { 0.0 } else { 1.3 };
                (t_exit, smooth3(u, v, wall_phase))
            }
            SceneKind::TexturedPlane => {
                let t = (PLANE_Z - origin.z) / dir.z;
                let hit = origin + t * dir;
                (t, smooth3(hit.x, hit.y, 0.4))
            }
            // Handled per pixel in `view_depth`; rays are not used.
            SceneKind::PointField => (4.0, [0.5, 0.5, 0.5]),
        }
    }

    /// Depth of one view's pixel at an arbitrary grid resolution.
    fn view_depth(
        &self,
        view: usize,
        pose: &Pose,
        intr: &CameraIntrinsics,
        x: usize,
        y: usize,
    ) -> f64 {
        match self.kind {
            SceneKind::PointField => {
                // The stored grid is at image resolution; map by ratio.
                let g = &self.field_depths[view];
                let sx = x * g.width() / intr.width;
                let sy = y * g.height() / intr.height;
                g.at(sx.min(g.width() - 1), sy.min(g.height() - 1))
            }
            _ => {
                let inv = pose.inverse();
                let ray_cam = intr.ray([x as f64, y as f64]);
                let origin = inv.apply(&Vector3::zeros());
                let dir = inv.rotation * ray_cam;
                self.trace(&origin, &dir).0
            }
        }
    }

    fn view_color(
        &self,
        view: usize,
        pose: &Pose,
        intr: &CameraIntrinsics,
        x: usize,
        y: usize,
    ) -> [f64; 3] {
        match self.kind {
            SceneKind::PointField => {
                let k = self.field_colors[view] as f64;
                smooth3(x as f64 * 0.11 + k, y as f64 * 0.13 - k, k)
            }
            _ => {
                let inv = pose.inverse();
                let ray_cam = intr.ray([x as f64, y as f64]);
                let origin = inv.apply(&Vector3::zeros());
                let dir = inv.rotation * ray_cam;
                self.trace(&origin, &dir).1
            }
        }
    }
}

/// Camera arc for the scene kind; test poses interleave between the training
/// poses.
fn camera_poses(spec: &SynthSpec) -> (Vec<Pose>, Vec<Pose>) {
    // The look target sits off the optical axis so no wall is ever exactly
    // fronto-parallel; a perpendicular wall would have constant z-depth,
    // which degenerates the affine depth fit.
    let place = |a: f64| -> Pose {
        let (eye, target) = match spec.kind {
            SceneKind::BoxRoom => (
                Vector3::new(1.1 * a.sin(), 0.12 * (2.0 * a).sin(), -1.0 + 0.3 * (1.0 - a.cos())),
                Vector3::new(0.55, 0.3, 3.0),
            ),
            SceneKind::TexturedPlane | SceneKind::PointField => (
                Vector3::new(0.9 * a.sin(), 0.1 * a, -0.2 * (1.0 - a.cos())),
                Vector3::new(0.9, 0.45, PLANE_Z),
            ),
        };
        Pose::look_at(&eye, &target, &Vector3::new(0.0, -1.0, 0.0))
    };
    let span = 0.5;
    let angle = |i: f64, count: usize| -> f64 {
        if count <= 1 {
            0.0
        } else {
            -span + 2.0 * span * i / (count - 1) as f64
        }
    };
    let train: Vec<Pose> = (0..spec.n_views)
        .map(|i| place(angle(i as f64, spec.n_views)))
        .collect();
    // Held-out views sit between consecutive training views.
    let test: Vec<Pose> = (0..spec.n_test_views)
        .map(|i| {
            let t = (i as f64 + 0.5) * (spec.n_views - 1) as f64
                / spec.n_test_views.max(1) as f64;
            place(angle(t, spec.n_views))
        })
        .collect();
    (train, test)
}

/// Writes a complete scene directory. Returns the training poses.
pub fn synth_scene(dir: &Path, spec: &SynthSpec) -> Result<Vec<Pose>, SynthError> {
    if spec.n_views < 2 {
        return Err(SynthError::Invalid("need at least 2 views".into()));
    }
    if !(spec.pair_scale > 0.0 && spec.pair_scale <= 1.0) {
        return Err(SynthError::Invalid("pair_scale must be in (0, 1]".into()));
    }
    if spec.width < 8 || spec.height < 8 {
        return Err(SynthError::Invalid("image size too small".into()));
    }

    let geometry = Geometry::new(spec);
    let (train_poses, test_poses) = camera_poses(spec);
    let intr = CameraIntrinsics::new(spec.focal, spec.width, spec.height)
        .map_err(|e| SynthError::Invalid(e.to_string()))?;

    // Images.
    for (k, pose) in train_poses.iter().enumerate() {
        let img = ColorImage::from_fn(spec.width, spec.height, |x, y| {
            geometry.view_color(k, pose, &intr, x, y)
        });
        write_png(&dir.join("images").join(format!("view_{k}.png")), &img)?;
    }
    for (k, pose) in test_poses.iter().enumerate() {
        let img = ColorImage::from_fn(spec.width, spec.height, |x, y| {
            geometry.view_color(spec.n_views + k, pose, &intr, x, y)
        });
        write_png(
            &dir.join("test").join("images").join(format!("view_{k}.png")),
            &img,
        )?;
    }

    // Per-edge scales with product exactly one.
    let n_edges = spec.n_views * (spec.n_views - 1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut log_scales: Vec<f64> = (0..n_edges)
        .map(|_| rng.gen_range(-spec.edge_scale_spread..=spec.edge_scale_spread))
        .collect();
    let mean = log_scales.iter().sum::<f64>() / n_edges as f64;
    for s in log_scales.iter_mut() {
        *s -= mean;
    }

    // Pair predictions at the pair resolution.
    let pw = ((spec.width as f64 * spec.pair_scale).round() as usize).max(8);
    let ph = ((spec.height as f64 * spec.pair_scale).round() as usize).max(8);
    let pair_intr = CameraIntrinsics::new(spec.focal * pw as f64 / spec.width as f64, pw, ph)
        .map_err(|e| SynthError::Invalid(e.to_string()))?;

    let mut edge_index = 0usize;
    for a in 0..spec.n_views {
        for b in a + 1..spec.n_views {
            let scale = log_scales[edge_index].exp();
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            noise_rng.set_stream(10 + edge_index as u64);
            edge_index += 1;

            // Both views' pixel points in view a's camera frame, stacked.
            let mut channels = [
                ScalarMap::constant(pw, 2 * ph, 0.0),
                ScalarMap::constant(pw, 2 * ph, 0.0),
                ScalarMap::constant(pw, 2 * ph, 0.0),
            ];
            let mut confidences = [
                ScalarMap::constant(pw, ph, 1.0),
                ScalarMap::constant(pw, ph, 1.0),
            ];
            for (slot, &view) in [a, b].iter().enumerate() {
                let pose = &train_poses[view];
                let inv = pose.inverse();
                for y in 0..ph {
                    for x in 0..pw {
                        let depth = geometry.view_depth(view, pose, &pair_intr, x, y);
                        let corrupted = spec.corrupt_fraction > 0.0
                            && noise_rng.gen_bool(spec.corrupt_fraction);
                        let depth = if corrupted { depth * 10.0 } else { depth };
                        let cam = pair_intr.unproject_unchecked([x as f64, y as f64], depth);
                        let world = inv.apply(&cam);
                        let mut in_a = scale * train_poses[a].apply(&world);
                        if spec.pointmap_noise > 0.0 {
                            in_a += Vector3::new(
                                noise_rng.gen_range(-spec.pointmap_noise..spec.pointmap_noise),
                                noise_rng.gen_range(-spec.pointmap_noise..spec.pointmap_noise),
                                noise_rng.gen_range(-spec.pointmap_noise..spec.pointmap_noise),
                            );
                        }
                        for c in 0..3 {
                            channels[c].set(x, y + slot * ph, in_a[c]);
                        }
                        if corrupted {
                            confidences[slot].set(x, y, 0.01);
                        }
                    }
                }
            }
            let stem = dir.join("pairs").join(format!("{a}_{b}"));
            for (c, name) in ["x", "y", "z"].iter().enumerate() {
                write_pfm(&stem.with_extension(format!("{name}.pfm")), &channels[c])?;
            }
            write_pfm(&stem.with_extension("cn.pfm"), &confidences[0])?;
            write_pfm(&stem.with_extension("cm.pfm"), &confidences[1])?;
        }
    }

    // Mono depth: ground truth through the affine map in inverse-depth space.
    for (k, pose) in train_poses.iter().enumerate() {
        let mono = ScalarMap::from_fn(spec.width, spec.height, |x, y| {
            let depth = geometry.view_depth(k, pose, &intr, x, y);
            (1.0 / depth - spec.mono_shift) / spec.mono_scale
        });
        write_pfm(&dir.join("mono").join(format!("view_{k}.pfm")), &mono)?;
    }

    write_poses(&dir.join("gt").join("poses.json"), &train_poses)?;
    if !test_poses.is_empty() {
        write_poses(&dir.join("test").join("poses.json"), &test_poses)?;
    }

    let config = PipelineConfig {
        n_views: spec.n_views,
        seed: spec.seed,
        ..PipelineConfig::default()
    };
    config
        .save(&dir.join("config.json"))
        .map_err(|e| SynthError::Invalid(e.to_string()))?;
    Ok(train_poses)
}
