//! Shared focal length recovery from a pointmap.
//!
//! The focal is the robust (L1) optimum of the reprojection residual between
//! centered pixel coordinates and the pointmap's normalized image-plane
//! coordinates, solved by iteratively reweighted least squares in the
//! Weiszfeld style. Per-pair estimates are averaged into the shared camera
//! model.

use thiserror::Error;

use crate::grid::{PointMap, ScalarMap};

const MAX_ITERATIONS: usize = 50;
const RELATIVE_TOLERANCE: f64 = 1e-6;
const MIN_SUPPORT_PIXELS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum FocalError {
    #[error("confidence is zero everywhere, no signal to estimate a focal")]
    NoSignal,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("only {0} usable pixels, need at least {MIN_SUPPORT_PIXELS}")]
    TooFewPixels(usize),
    #[error("pointmap and confidence shapes differ")]
    ShapeMismatch,
    #[error("cannot average an empty set of focal estimates")]
    EmptyEstimates,
}

/// Confidence-weighted robust focal estimate from a pointmap expressed in its
/// own camera frame.
///
/// Iteration stops when successive estimates differ by less than 1e-6
/// relative, or after 50 reweighting rounds.
pub fn estimate_focal(pointmap: &PointMap, confidence: &ScalarMap) -> Result<f64, FocalError> {
    if pointmap.width() != confidence.width() || pointmap.height() != confidence.height() {
        return Err(FocalError::ShapeMismatch);
    }
    let w = pointmap.width();
    let h = pointmap.height();
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;

    // (centered pixel, normalized image point, weight) triples.
    let mut terms: Vec<([f64; 2], [f64; 2], f64)> = Vec::new();
    let mut any_confident = false;
    for y in 0..h {
        for x in 0..w {
            let c = confidence.at(x, y);
            if c <= 0.0 {
                continue;
            }
            any_confident = true;
            let p = pointmap.at(x, y);
            if p.z <= 0.0 || !p.z.is_finite() {
                continue;
            }
            terms.push((
                [x as f64 - cx, y as f64 - cy],
                [p.x / p.z, p.y / p.z],
                c,
            ));
        }
    }
    if !any_confident {
        return Err(FocalError::NoSignal);
    }
    if terms.is_empty() {
        return Err(FocalError::DegenerateGeometry(
            "no confident pixel has positive depth",
        ));
    }
    if terms.len() < MIN_SUPPORT_PIXELS {
        return Err(FocalError::TooFewPixels(terms.len()));
    }

    // Plain weighted least squares seeds the reweighting.
    let solve = |weights: &dyn Fn(&([f64; 2], [f64; 2], f64)) -> f64| -> Result<f64, FocalError> {
        let mut num = 0.0;
        let mut den = 0.0;
        for term in &terms {
            let w = weights(term);
            let (u, v, _) = term;
            num += w * (u[0] * v[0] + u[1] * v[1]);
            den += w * (v[0] * v[0] + v[1] * v[1]);
        }
        if den <= 1e-18 {
            return Err(FocalError::DegenerateGeometry(
                "points lie on the optical axis, focal is unidentifiable",
            ));
        }
        Ok(num / den)
    };

    let mut focal = solve(&|&(_, _, c)| c)?;
    for _ in 0..MAX_ITERATIONS {
        let current = focal;
        let next = solve(&|&(u, v, c)| {
            let rx = u[0] - current * v[0];
            let ry = u[1] - current * v[1];
            c / (rx * rx + ry * ry).sqrt().max(1e-12)
        })?;
        let done = (next - focal).abs() <= RELATIVE_TOLERANCE * focal.abs().max(1.0);
        focal = next;
        if done {
            break;
        }
    }
    if !(focal > 0.0) || !focal.is_finite() {
        return Err(FocalError::DegenerateGeometry("estimate is non-positive"));
    }
    Ok(focal)
}

/// Arithmetic mean of per-pair focal estimates; all views share one camera.
pub fn average_focal(per_pair_focals: &[f64]) -> Result<f64, FocalError> {
    if per_pair_focals.is_empty() {
        return Err(FocalError::EmptyEstimates);
    }
    Ok(per_pair_focals.iter().sum::<f64>() / per_pair_focals.len() as f64)
}
