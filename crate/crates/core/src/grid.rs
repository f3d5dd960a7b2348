//! Row-major image grids: scalar maps (depth / confidence), RGB images and
//! binary masks, plus bilinear sampling with border clamping.
//!
//! Depth maps hold strictly positive finite values at valid pixels and a
//! non-finite sentinel (NaN) at invalid pixels. Confidence maps are
//! non-negative and finite everywhere.

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {0}x{1}")]
    EmptyGrid(usize, usize),
    #[error("expected {expected} samples for {width}x{height}, got {got}")]
    SampleCount {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("non-finite sample at pixel ({0}, {1})")]
    NonFiniteSample(usize, usize),
    #[error("invalid {kind} value {value} at pixel ({x}, {y})")]
    InvalidValue {
        kind: &'static str,
        value: f64,
        x: usize,
        y: usize,
    },
}

/// Sentinel marking an invalid depth pixel.
pub const DEPTH_SENTINEL: f64 = f64::NAN;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ScalarMap {
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyGrid(width, height));
        }
        if values.len() != width * height {
            return Err(GridError::SampleCount {
                width,
                height,
                expected: width * height,
                got: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.values[y * self.width + x] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn same_shape(&self, other: &ScalarMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Checks the depth-map invariant: strictly positive and finite wherever
    /// the pixel is valid (finite), NaN sentinel elsewhere.
    pub fn validate_depth(&self) -> Result<(), GridError> {
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.at(x, y);
                if v.is_finite() && v <= 0.0 {
                    return Err(GridError::InvalidValue {
                        kind: "depth",
                        value: v,
                        x,
                        y,
                    });
                }
                if v.is_infinite() {
                    return Err(GridError::NonFiniteSample(x, y));
                }
            }
        }
        Ok(())
    }

    /// Checks the confidence-map invariant: non-negative and finite everywhere.
    pub fn validate_confidence(&self) -> Result<(), GridError> {
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.at(x, y);
                if !v.is_finite() {
                    return Err(GridError::NonFiniteSample(x, y));
                }
                if v < 0.0 {
                    return Err(GridError::InvalidValue {
                        kind: "confidence",
                        value: v,
                        x,
                        y,
                    });
                }
            }
        }
        Ok(())
    }

    /// Bilinear sample at a continuous location, clamped at the borders
    /// (no wraparound).
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear upsampling with corner alignment: destination pixel `(x, y)`
    /// samples source location `(x * (sw-1) / (dw-1), y * (sh-1) / (dh-1))`.
    /// Reproduces constant maps exactly and is exact for functions bilinear
    /// in the source pixel coordinates.
    pub fn upsample_bilinear(&self, width: usize, height: usize) -> ScalarMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = if width > 1 {
            (self.width - 1) as f64 / (width - 1) as f64
        } else {
            0.0
        };
        let sy = if height > 1 {
            (self.height - 1) as f64 / (height - 1) as f64
        } else {
            0.0
        };
        ScalarMap::from_fn(width, height, |x, y| {
            self.sample_bilinear(x as f64 * sx, y as f64 * sy)
        })
    }
}

/// RGB image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn constant(width: usize, height: usize, color: [f64; 3]) -> Self {
        let color = color.map(|c| c.clamp(0.0, 1.0));
        Self {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    /// Builds an image from raw samples, rejecting non-finite values and
    /// clamping everything else to `[0, 1]`.
    pub fn from_data(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyGrid(width, height));
        }
        if data.len() != width * height {
            return Err(GridError::SampleCount {
                width,
                height,
                expected: width * height,
                got: data.len(),
            });
        }
        let mut clamped = data;
        for (i, px) in clamped.iter_mut().enumerate() {
            for c in px.iter_mut() {
                if !c.is_finite() {
                    return Err(GridError::NonFiniteSample(i % width, i / width));
                }
                *c = c.clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            width,
            height,
            data: clamped,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).map(|c| c.clamp(0.0, 1.0)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, color: [f64; 3]) {
        self.data[y * self.width + x] = color.map(|c| c.clamp(0.0, 1.0));
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn same_shape(&self, other: &ColorImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Per-channel scalar view, used by the windowed statistics in the
    /// structural-similarity code.
    pub fn channel(&self, c: usize) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            values: self.data.iter().map(|px| px[c]).collect(),
        }
    }
}

/// Per-pixel 3D coordinates, e.g. a pointmap expressed in some camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    width: usize,
    height: usize,
    points: Vec<Vector3<f64>>,
}

impl PointMap {
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Vector3<f64>,
    ) -> Self {
        let mut points = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                points.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            points,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Vector3<f64> {
        self.points[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, p: Vector3<f64>) {
        self.points[y * self.width + x] = p;
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn same_shape(&self, other: &PointMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn validate_finite(&self) -> Result<(), GridError> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(GridError::NonFiniteSample(i % self.width, i / self.width));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.values[y * self.width + x] = value;
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count_true(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// True if every set pixel of `self` is also set in `other`.
    pub fn subset_of(&self, other: &BinaryMask) -> bool {
        self.same_shape(other)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(&a, &b)| !a || b)
    }
}
