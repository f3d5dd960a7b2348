//! Confidence-aware alignment of monocular relative inverse depth to the
//! coarse metric depth.
//!
//! The coarse depth (upsampled to image resolution) is trusted only where the
//! pairwise confidence is high, so a top-P confidence mask selects the pixels
//! used to fit the affine map `1/D_coarse ~ b + a * D_mono` in closed form.
//! Applying the fit turns the relative mono depth into metric depth
//! `1 / (b + a * D_mono)`.

use thiserror::Error;

use crate::grid::{BinaryMask, ScalarMap};

#[derive(Debug, Error, PartialEq)]
pub enum DepthAlignError {
    #[error("need at least one confidence map")]
    EmptyList,
    #[error("map dimensions disagree: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("retained fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("need at least 2 masked pixels with distinct mono values, got {0}")]
    TooFewMaskedPixels(usize),
    #[error("coarse depth must be strictly positive on the mask, pixel ({0}, {1}) is {2}")]
    NonPositiveCoarse(usize, usize, f64),
    #[error("normal matrix is singular (mono depth constant over the mask)")]
    DegenerateFit,
    #[error("aligned depth non-positive at {pixels} pixels")]
    NonPositiveDepth { pixels: usize },
}

/// Fitted affine map in inverse-depth space, together with the mask it was
/// estimated on.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDepthFit {
    pub scale: f64,
    pub shift: f64,
    pub mask: BinaryMask,
    pub retained_fraction: f64,
}

/// Per-view confidence: pointwise maximum across all pairwise confidence maps
/// covering the view.
pub fn build_confidence(per_pair: &[ScalarMap]) -> Result<ScalarMap, DepthAlignError> {
    let first = per_pair.first().ok_or(DepthAlignError::EmptyList)?;
    let mut out = first.clone();
    for map in &per_pair[1..] {
        if !map.same_shape(first) {
            return Err(DepthAlignError::DimensionMismatch(
                first.width(),
                first.height(),
                map.width(),
                map.height(),
            ));
        }
        for (o, &v) in out.values_mut().iter_mut().zip(map.values()) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Mask of exactly `ceil(p * W * H)` pixels holding the highest confidences;
/// ties are broken by raster order.
pub fn top_p_mask(confidence: &ScalarMap, p: f64) -> Result<BinaryMask, DepthAlignError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DepthAlignError::BadFraction(p));
    }
    let total = confidence.len();
    let keep = ((p * total as f64).ceil() as usize).min(total);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        confidence.values()[b]
            .total_cmp(&confidence.values()[a])
            .then(a.cmp(&b))
    });
    let mut mask = BinaryMask::filled(confidence.width(), confidence.height(), false);
    for &i in order.iter().take(keep) {
        mask.set(i % confidence.width(), i / confidence.width(), true);
    }
    Ok(mask)
}

/// Closed-form least-squares fit of `1/coarse_up ~ shift + scale * mono`
/// over the masked pixels (2x2 normal equations).
///
/// The fit is rejected if the implied aligned depth would be non-positive
/// anywhere in the frame.
pub fn fit_affine(
    coarse_up: &ScalarMap,
    mono: &ScalarMap,
    mask: &BinaryMask,
) -> Result<AffineDepthFit, DepthAlignError> {
    if !coarse_up.same_shape(mono) {
        return Err(DepthAlignError::DimensionMismatch(
            coarse_up.width(),
            coarse_up.height(),
            mono.width(),
            mono.height(),
        ));
    }
    if mask.width() != mono.width() || mask.height() != mono.height() {
        return Err(DepthAlignError::DimensionMismatch(
            mask.width(),
            mask.height(),
            mono.width(),
            mono.height(),
        ));
    }

    let mut n = 0.0f64;
    let mut sum_x = 0.0;
    let mut sum_xx = 0.0;
    let mut sum_y = 0.0;
    let mut sum_xy = 0.0;
    let mut count = 0usize;
    let mut first_value = None;
    let mut distinct = false;
    for y in 0..mono.height() {
        for x in 0..mono.width() {
            if !mask.at(x, y) {
                continue;
            }
            let d = coarse_up.at(x, y);
            if !(d > 0.0) {
                return Err(DepthAlignError::NonPositiveCoarse(x, y, d));
            }
            let xv = mono.at(x, y);
            let yv = 1.0 / d;
            match first_value {
                None => first_value = Some(xv),
                Some(f) if f != xv => distinct = true,
                _ => {}
            }
            n += 1.0;
            sum_x += xv;
            sum_xx += xv * xv;
            sum_y += yv;
            sum_xy += xv * yv;
            count += 1;
        }
    }
    if count < 2 || !distinct {
        if count < 2 {
            return Err(DepthAlignError::TooFewMaskedPixels(count));
        }
        return Err(DepthAlignError::DegenerateFit);
    }

    let det = n * sum_xx - sum_x * sum_x;
    if det.abs() <= 1e-15 * (n * sum_xx).abs().max(1.0) {
        return Err(DepthAlignError::DegenerateFit);
    }
    let scale = (n * sum_xy - sum_x * sum_y) / det;
    let shift = (sum_xx * sum_y - sum_x * sum_xy) / det;

    let bad = mono
        .values()
        .iter()
        .filter(|&&m| !(shift + scale * m > 0.0))
        .count();
    if bad > 0 {
        return Err(DepthAlignError::NonPositiveDepth { pixels: bad });
    }

    Ok(AffineDepthFit {
        scale,
        shift,
        mask: mask.clone(),
        retained_fraction: count as f64 / mono.len() as f64,
    })
}

/// Metric depth from the fitted affine map: `1 / (shift + scale * mono)`.
pub fn apply_fit(mono: &ScalarMap, fit: &AffineDepthFit) -> Result<ScalarMap, DepthAlignError> {
    let bad = mono
        .values()
        .iter()
        .filter(|&&m| !(fit.shift + fit.scale * m > 0.0))
        .count();
    if bad > 0 {
        return Err(DepthAlignError::NonPositiveDepth { pixels: bad });
    }
    Ok(mono.map(|m| 1.0 / (fit.shift + fit.scale * m)))
}
