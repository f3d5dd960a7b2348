//! Pinhole camera model with a centered principal point and a single shared
//! focal length for both axes.
//!
//! Pixel centers sit at integer coordinates: pixel `(x, y)` samples the
//! continuous image location `(x, y)`, and the principal point is exactly
//! `(width / 2, height / 2)`.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("focal length must be positive, got {0}")]
    NonPositiveFocal(f64),
    #[error("image dimensions must be positive, got {0}x{1}")]
    EmptyImage(usize, usize),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({0}, {1}) outside {2}x{3} image")]
    PixelOutOfBounds(f64, f64, usize, usize),
}

/// Shared-focal pinhole intrinsics. The principal point is derived from the
/// image size and never stored separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

/// Outcome of projecting a camera-frame point onto the image plane.
///
/// A point with non-positive camera depth is tagged rather than raised as an
/// error so callers (the forward warper in particular) can drop it cheaply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    InFront { pixel: [f64; 2], depth: f64 },
    BehindCamera,
}

impl Projection {
    pub fn in_front(self) -> Option<([f64; 2], f64)> {
        match self {
            Projection::InFront { pixel, depth } => Some((pixel, depth)),
            Projection::BehindCamera => None,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(focal: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(CameraError::NonPositiveFocal(focal));
        }
        if width == 0 || height == 0 {
            return Err(CameraError::EmptyImage(width, height));
        }
        Ok(Self {
            focal,
            width,
            height,
        })
    }

    /// Principal point `(width / 2, height / 2)`.
    pub fn principal_point(&self) -> [f64; 2] {
        [self.width as f64 / 2.0, self.height as f64 / 2.0]
    }

    /// The 3x3 calibration matrix with the shared focal on both diagonal
    /// entries.
    pub fn matrix(&self) -> Matrix3<f64> {
        let [cx, cy] = self.principal_point();
        Matrix3::new(self.focal, 0.0, cx, 0.0, self.focal, cy, 0.0, 0.0, 1.0)
    }

    /// Back-projects a pixel at a given depth into the camera frame.
    ///
    /// The result re-projects onto the same pixel with the same depth.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> Result<Vector3<f64>, CameraError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(CameraError::NonPositiveDepth(depth));
        }
        let [x, y] = pixel;
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return Err(CameraError::PixelOutOfBounds(x, y, self.width, self.height));
        }
        Ok(self.unproject_unchecked(pixel, depth))
    }

    /// As [`unproject`](Self::unproject) but without bounds/positivity checks;
    /// used on hot paths where the caller already validated the depth map.
    pub fn unproject_unchecked(&self, pixel: [f64; 2], depth: f64) -> Vector3<f64> {
        let [cx, cy] = self.principal_point();
        Vector3::new(
            (pixel[0] - cx) * depth / self.focal,
            (pixel[1] - cy) * depth / self.focal,
            depth,
        )
    }

    /// Projects a camera-frame point. The returned pixel may land outside the
    /// image bounds; filtering is the caller's job.
    pub fn project(&self, point: &Vector3<f64>) -> Projection {
        if point.z <= 0.0 {
            return Projection::BehindCamera;
        }
        let [cx, cy] = self.principal_point();
        Projection::InFront {
            pixel: [
                self.focal * point.x / point.z + cx,
                self.focal * point.y / point.z + cy,
            ],
            depth: point.z,
        }
    }

    /// Camera-frame ray direction through a pixel, i.e. the unprojection at
    /// unit depth.
    pub fn ray(&self, pixel: [f64; 2]) -> Vector3<f64> {
        self.unproject_unchecked(pixel, 1.0)
    }
}
