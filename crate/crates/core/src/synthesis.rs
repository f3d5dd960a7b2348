//! Novel-view supervision: warp the nearest training image to each sampled
//! pose, clean the validity mask, and complete the holes with the configured
//! inpainter. A pose whose warp or fill fails is skipped and recorded, not
//! fatal.

use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::grid::{ColorImage, ScalarMap};
use crate::inpaint::{InpaintError, Inpainter};
use crate::pose::Pose;
use crate::spline::NovelPoseSet;
use crate::warp::{clean_mask, warp, WarpError, WarpResult};

#[derive(Debug, Error, PartialEq)]
pub enum SynthesisError {
    #[error("inputs disagree: {0}")]
    InconsistentInputs(&'static str),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Inpaint(#[from] InpaintError),
}

/// One completed novel view.
#[derive(Debug, Clone)]
pub struct SynthesizedView {
    pub pose_index: usize,
    pub pose: Pose,
    pub source_view: usize,
    pub warp: WarpResult,
}

/// All novel views, successful and failed.
#[derive(Debug)]
pub struct SynthesizedViews {
    pub views: Vec<SynthesizedView>,
    pub failures: Vec<(usize, SynthesisError)>,
}

/// Runs warp, mask cleaning and inpainting for every pose in the set.
///
/// The inpainted image is defined everywhere and agrees with the warped image
/// bit-exactly on the cleaned mask; splats discarded by the cleaning are
/// blanked before the filler sees them so outliers cannot leak into the fill.
pub fn synthesize(
    training_images: &[ColorImage],
    aligned_depths: &[ScalarMap],
    training_poses: &[Pose],
    pose_set: &NovelPoseSet,
    intrinsics: &CameraIntrinsics,
    inpainter: &dyn Inpainter,
    clean_window: usize,
) -> Result<SynthesizedViews, SynthesisError> {
    if training_images.len() != training_poses.len()
        || training_images.len() != aligned_depths.len()
    {
        return Err(SynthesisError::InconsistentInputs(
            "images, depths and poses must have matching counts",
        ));
    }
    if pose_set.poses.len() != pose_set.source_views.len() {
        return Err(SynthesisError::InconsistentInputs(
            "pose set sources out of sync",
        ));
    }
    if pose_set.source_views.iter().any(|&s| s >= training_images.len()) {
        return Err(SynthesisError::InconsistentInputs(
            "source view index out of range",
        ));
    }

    let mut views = Vec::with_capacity(pose_set.poses.len());
    let mut failures = Vec::new();
    for (k, (pose, &src)) in pose_set
        .poses
        .iter()
        .zip(&pose_set.source_views)
        .enumerate()
    {
        match synthesize_one(
            &training_images[src],
            &aligned_depths[src],
            &training_poses[src],
            pose,
            intrinsics,
            inpainter,
            clean_window,
        ) {
            Ok(warp) => views.push(SynthesizedView {
                pose_index: k,
                pose: *pose,
                source_view: src,
                warp,
            }),
            Err(err) => {
                log::warn!("novel pose {k} skipped: {err}");
                failures.push((k, err));
            }
        }
    }
    Ok(SynthesizedViews { views, failures })
}

fn synthesize_one(
    source: &ColorImage,
    depth: &ScalarMap,
    src_pose: &Pose,
    dst_pose: &Pose,
    intrinsics: &CameraIntrinsics,
    inpainter: &dyn Inpainter,
    clean_window: usize,
) -> Result<WarpResult, SynthesisError> {
    let mut result = warp(source, depth, src_pose, dst_pose, intrinsics)?;
    result.cleaned_mask = clean_mask(&result.raw_mask, clean_window);

    // Splats the cleaning rejected become holes again.
    let mut masked = result.warped.clone();
    for y in 0..masked.height() {
        for x in 0..masked.width() {
            if !result.cleaned_mask.at(x, y) {
                masked.set(x, y, [0.0, 0.0, 0.0]);
            }
        }
    }
    let filled = inpainter.fill(&masked, &result.cleaned_mask)?;
    result.inpainted = Some(filled);
    Ok(result)
}
