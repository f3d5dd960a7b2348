//! Depth-based forward warping with Z-buffering, and cleanup of the
//! resulting validity mask.
//!
//! Every source pixel is unprojected through its aligned depth, moved by the
//! source-to-destination camera transform, re-projected, and splatted onto
//! the nearest destination pixel. When several sources land on one
//! destination pixel the smallest destination depth wins. Holes (pixels that
//! received no splat) stay unset in the raw mask; isolated splats are then
//! removed by a windowed support count.

use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::grid::{BinaryMask, ColorImage, ScalarMap, DEPTH_SENTINEL};
use crate::pose::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum WarpError {
    #[error("image is {0}x{1} but depth is {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("{skipped} of {total} source pixels had invalid depth")]
    DegenerateDepth { skipped: usize, total: usize },
}

/// A warped view: image, validity masks, per-pixel winning depth, and the
/// inpainted completion once a hole filler has run.
#[derive(Debug, Clone)]
pub struct WarpResult {
    pub warped: ColorImage,
    pub raw_mask: BinaryMask,
    pub cleaned_mask: BinaryMask,
    pub inpainted: Option<ColorImage>,
    pub zbuffer: ScalarMap,
}

/// Forward-warps `source` from `src_pose` to `dst_pose` through `depth`.
///
/// Returns the result before mask cleaning (`cleaned_mask` starts as a copy
/// of `raw_mask`) and before inpainting. Source pixels with non-positive or
/// non-finite depth are skipped and counted; if more than half are skipped
/// the warp is reported as degenerate.
pub fn warp(
    source: &ColorImage,
    depth: &ScalarMap,
    src_pose: &Pose,
    dst_pose: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<WarpResult, WarpError> {
    if source.width() != depth.width() || source.height() != depth.height() {
        return Err(WarpError::ShapeMismatch(
            source.width(),
            source.height(),
            depth.width(),
            depth.height(),
        ));
    }
    let (w, h) = (source.width(), source.height());
    // Source camera frame to destination camera frame.
    let relative = Pose::compose(dst_pose, &src_pose.inverse());

    let mut warped = ColorImage::constant(w, h, [0.0, 0.0, 0.0]);
    let mut raw_mask = BinaryMask::filled(w, h, false);
    let mut zbuffer = ScalarMap::constant(w, h, DEPTH_SENTINEL);
    let mut skipped = 0usize;

    for y in 0..h {
        for x in 0..w {
            let d = depth.at(x, y);
            if !(d > 0.0) || !d.is_finite() {
                skipped += 1;
                continue;
            }
            let cam_src = intrinsics.unproject_unchecked([x as f64, y as f64], d);
            let cam_dst = relative.apply(&cam_src);
            let Some((pixel, dst_depth)) = intrinsics.project(&cam_dst).in_front() else {
                continue;
            };
            let xi = pixel[0].round();
            let yi = pixel[1].round();
            if xi < 0.0 || yi < 0.0 || xi > (w - 1) as f64 || yi > (h - 1) as f64 {
                continue;
            }
            let (xi, yi) = (xi as usize, yi as usize);
            let current = zbuffer.at(xi, yi);
            if !raw_mask.at(xi, yi) || dst_depth < current {
                raw_mask.set(xi, yi, true);
                zbuffer.set(xi, yi, dst_depth);
                warped.set(xi, yi, source.at(x, y));
            }
        }
    }

    if 2 * skipped > w * h {
        return Err(WarpError::DegenerateDepth {
            skipped,
            total: w * h,
        });
    }

    Ok(WarpResult {
        warped,
        cleaned_mask: raw_mask.clone(),
        raw_mask,
        inpainted: None,
        zbuffer,
    })
}

/// Removes isolated splats: a set pixel survives iff its `w x w` window
/// (clipped at the borders, center included) contains at least `w*w/2` set
/// pixels, or the clipped window is entirely set.
///
/// The threshold is not rescaled at the borders; the entirely-set escape
/// hatch keeps solid regions intact there. Unset pixels are never added.
pub fn clean_mask(raw_mask: &BinaryMask, window: usize) -> BinaryMask {
    assert!(
        window >= 3 && window % 2 == 1,
        "window must be odd and at least 3, got {window}"
    );
    let (w, h) = (raw_mask.width(), raw_mask.height());
    let half = window / 2;
    let threshold = window * window; // compare 2*count against this
    BinaryMask::from_fn(w, h, |x, y| {
        if !raw_mask.at(x, y) {
            return false;
        }
        let x0 = x.saturating_sub(half);
        let y0 = y.saturating_sub(half);
        let x1 = (x + half).min(w - 1);
        let y1 = (y + half).min(h - 1);
        let mut count = 0usize;
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                if raw_mask.at(xx, yy) {
                    count += 1;
                }
            }
        }
        let window_pixels = (x1 - x0 + 1) * (y1 - y0 + 1);
        2 * count >= threshold || count == window_pixels
    })
}
