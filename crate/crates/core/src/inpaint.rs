//! Hole filling behind a pluggable interface.
//!
//! The built-in baseline seeds holes with a push-pull image pyramid and then
//! relaxes them to the harmonic fill (each hole pixel is repeatedly replaced
//! by the mean of its in-bounds 4-neighbors) until the update falls below a
//! tolerance. Known pixels are never touched, which is also the contract any
//! external implementation must satisfy: the output equals the input at
//! every set-mask pixel, bit-exactly.

use thiserror::Error;

use crate::grid::{BinaryMask, ColorImage};

#[derive(Debug, Error, PartialEq)]
pub enum InpaintError {
    #[error("image is {0}x{1} but mask is {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("mask has no set pixels, nothing anchors the fill")]
    EmptyMask,
    #[error("external inpainting failed: {0}")]
    External(String),
}

/// A hole filler. Unset mask pixels are the holes.
pub trait Inpainter {
    fn fill(&self, image: &ColorImage, mask: &BinaryMask) -> Result<ColorImage, InpaintError>;
}

/// Iterative harmonic diffusion initialized by a push-pull pass.
#[derive(Debug, Clone)]
pub struct DiffusionInpainter {
    pub max_sweeps: usize,
    pub tolerance: f64,
}

impl Default for DiffusionInpainter {
    fn default() -> Self {
        Self {
            max_sweeps: 500,
            tolerance: 1e-4,
        }
    }
}

impl Inpainter for DiffusionInpainter {
    fn fill(&self, image: &ColorImage, mask: &BinaryMask) -> Result<ColorImage, InpaintError> {
        if image.width() != mask.width() || image.height() != mask.height() {
            return Err(InpaintError::ShapeMismatch(
                image.width(),
                image.height(),
                mask.width(),
                mask.height(),
            ));
        }
        if mask.count_true() == 0 {
            return Err(InpaintError::EmptyMask);
        }
        if mask.count_true() == image.width() * image.height() {
            return Ok(image.clone());
        }

        let (w, h) = (image.width(), image.height());
        let mut out = push_pull_seed(image, mask);

        let holes: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| !mask.at(x, y))
            .collect();

        // Gauss-Seidel relaxation in raster order; deterministic.
        for _ in 0..self.max_sweeps {
            let mut max_change = 0.0f64;
            for &(x, y) in &holes {
                let mut sum = [0.0; 3];
                let mut count = 0.0;
                let mut add = |px: [f64; 3]| {
                    for c in 0..3 {
                        sum[c] += px[c];
                    }
                    count += 1.0;
                };
                if x > 0 {
                    add(out.at(x - 1, y));
                }
                if x + 1 < w {
                    add(out.at(x + 1, y));
                }
                if y > 0 {
                    add(out.at(x, y - 1));
                }
                if y + 1 < h {
                    add(out.at(x, y + 1));
                }
                let old = out.at(x, y);
                let new = [sum[0] / count, sum[1] / count, sum[2] / count];
                for c in 0..3 {
                    max_change = max_change.max((new[c] - old[c]).abs());
                }
                out.set(x, y, new);
            }
            if max_change < self.tolerance {
                break;
            }
        }
        Ok(out)
    }
}

/// Low-resolution push-pull pass: averages known pixels down to a single
/// texel, then propagates coarse values back into the holes, giving the
/// diffusion a sensible start.
fn push_pull_seed(image: &ColorImage, mask: &BinaryMask) -> ColorImage {
    struct Level {
        w: usize,
        h: usize,
        color: Vec<[f64; 3]>,
        weight: Vec<f64>,
    }

    let (w0, h0) = (image.width(), image.height());
    let mut levels = vec![Level {
        w: w0,
        h: h0,
        color: (0..h0)
            .flat_map(|y| (0..w0).map(move |x| (x, y)))
            .map(|(x, y)| image.at(x, y))
            .collect(),
        weight: (0..h0)
            .flat_map(|y| (0..w0).map(move |x| (x, y)))
            .map(|(x, y)| if mask.at(x, y) { 1.0 } else { 0.0 })
            .collect(),
    }];

    // Push: average available pixels into ever coarser grids.
    while levels.last().unwrap().w > 1 || levels.last().unwrap().h > 1 {
        let prev = levels.last().unwrap();
        let (w, h) = (prev.w.div_ceil(2), prev.h.div_ceil(2));
        let mut color = vec![[0.0; 3]; w * h];
        let mut weight = vec![0.0; w * h];
        for y in 0..prev.h {
            for x in 0..prev.w {
                let wgt = prev.weight[y * prev.w + x];
                if wgt <= 0.0 {
                    continue;
                }
                let idx = (y / 2) * w + x / 2;
                let src = prev.color[y * prev.w + x];
                for c in 0..3 {
                    color[idx][c] += wgt * src[c];
                }
                weight[idx] += wgt;
            }
        }
        for i in 0..w * h {
            if weight[i] > 0.0 {
                for c in 0..3 {
                    color[i][c] /= weight[i];
                }
                weight[i] = 1.0;
            }
        }
        levels.push(Level {
            w,
            h,
            color,
            weight,
        });
    }

    // Pull: fill empty texels from their parent, coarse to fine.
    for li in (0..levels.len() - 1).rev() {
        let (fine, coarse) = {
            let (a, b) = levels.split_at_mut(li + 1);
            (&mut a[li], &b[0])
        };
        for y in 0..fine.h {
            for x in 0..fine.w {
                let idx = y * fine.w + x;
                if fine.weight[idx] <= 0.0 {
                    fine.color[idx] = coarse.color[(y / 2) * coarse.w + x / 2];
                    fine.weight[idx] = 1.0;
                }
            }
        }
    }

    let seeded = &levels[0];
    let mut out = image.clone();
    for y in 0..h0 {
        for x in 0..w0 {
            if !mask.at(x, y) {
                out.set(x, y, seeded.color[y * w0 + x]);
            }
        }
    }
    out
}
