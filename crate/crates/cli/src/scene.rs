//! Scene-directory ingestion and validation.
//!
//! Layout:
//!
//! ```text
//! scene/
//!   config.json                 run configuration (defaults for this scene)
//!   images/view_{k}.png         training images
//!   pairs/{n}_{m}.x.pfm         pointmap x channel, both views stacked:
//!                               rows 0..H are view n's pointmap, rows H..2H
//!                               are view m's, both in view n's frame
//!   pairs/{n}_{m}.y.pfm         pointmap y channel (same stacking)
//!   pairs/{n}_{m}.z.pfm         pointmap z channel (same stacking)
//!   pairs/{n}_{m}.cn.pfm        confidence of view n's pointmap
//!   pairs/{n}_{m}.cm.pfm        confidence of view m's pointmap
//!   mono/view_{k}.pfm           monocular relative inverse depth
//!   gt/poses.json               optional ground-truth world-to-camera poses
//!   test/images/view_{k}.png    optional held-out images
//!   test/poses.json             optional held-out ground-truth poses
//! ```

use std::path::{Path, PathBuf};

use sparsesplat_core::alignment::PairPrediction;
use sparsesplat_core::grid::{ColorImage, PointMap, ScalarMap};
use sparsesplat_core::pose::Pose;
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::formats::{read_image, read_poses, FormatError};
use crate::pfm::{read_pfm, PfmError};

/// Advisory ceiling from the upstream pairwise model; larger inputs only
/// warn because the synthetic oracle is resolution-free.
const PAIR_LONG_SIDE_LIMIT: usize = 512;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing {path}: {hint}")]
    MissingFile { path: PathBuf, hint: &'static str },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pfm(#[from] PfmError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("inconsistent resolutions:\n{}", offenders.join("\n"))]
    Resolution { offenders: Vec<String> },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{path}: pose count {got}, expected {expected}")]
    PoseCount {
        path: PathBuf,
        got: usize,
        expected: usize,
    },
}

/// Everything a run needs, loaded and shape-checked.
pub struct SceneBundle {
    pub config: PipelineConfig,
    pub images: Vec<ColorImage>,
    pub pairs: Vec<PairPrediction>,
    pub mono: Vec<ScalarMap>,
    pub gt_poses: Option<Vec<Pose>>,
    pub test_images: Vec<ColorImage>,
    pub test_poses: Option<Vec<Pose>>,
}

impl SceneBundle {
    pub fn image_width(&self) -> usize {
        self.images[0].width()
    }

    pub fn image_height(&self) -> usize {
        self.images[0].height()
    }

    pub fn pair_width(&self) -> usize {
        self.pairs[0].pointmap_first.width()
    }

    pub fn pair_height(&self) -> usize {
        self.pairs[0].pointmap_first.height()
    }
}

fn require(path: PathBuf, hint: &'static str) -> Result<PathBuf, IngestError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(IngestError::MissingFile { path, hint })
    }
}

/// Splits a stacked-channel grid into the two per-view halves.
fn split_stacked(
    path: &Path,
    stacked: &ScalarMap,
) -> Result<(ScalarMap, ScalarMap), IngestError> {
    if stacked.height() % 2 != 0 {
        return Err(IngestError::Malformed {
            path: path.to_path_buf(),
            message: format!(
                "stacked pointmap channel must have even height, got {}",
                stacked.height()
            ),
        });
    }
    let (w, h) = (stacked.width(), stacked.height() / 2);
    let first = ScalarMap::from_fn(w, h, |x, y| stacked.at(x, y));
    let second = ScalarMap::from_fn(w, h, |x, y| stacked.at(x, y + h));
    Ok((first, second))
}

fn pointmap_from_channels(x: &ScalarMap, y: &ScalarMap, z: &ScalarMap) -> PointMap {
    PointMap::from_fn(x.width(), x.height(), |px, py| {
        nalgebra::Vector3::new(x.at(px, py), y.at(px, py), z.at(px, py))
    })
}

/// Loads and validates a scene directory.
pub fn ingest(dir: &Path) -> Result<SceneBundle, IngestError> {
    let config = PipelineConfig::load(&require(
        dir.join("config.json"),
        "every scene carries its run configuration; create one with `sparsesplat synth` \
         or copy a default",
    )?)?;
    let n = config.n_views;

    let mut images = Vec::with_capacity(n);
    for k in 0..n {
        let path = require(
            dir.join("images").join(format!("view_{k}.png")),
            "training images are the primary input",
        )?;
        images.push(read_image(&path)?);
    }

    let mut offenders = Vec::new();
    let (iw, ih) = (images[0].width(), images[0].height());
    for (k, img) in images.iter().enumerate() {
        if img.width() != iw || img.height() != ih {
            offenders.push(format!(
                "images/view_{k}.png is {}x{}, expected {iw}x{ih}",
                img.width(),
                img.height()
            ));
        }
    }

    let mut pairs = Vec::new();
    let mut pair_dims: Option<(usize, usize)> = None;
    for a in 0..n {
        for b in a + 1..n {
            let stem = dir.join("pairs").join(format!("{a}_{b}"));
            let hint = "pairwise pointmaps come from the synthetic oracle (`sparsesplat synth`) \
                        or from converted stereo-model outputs (see the README)";
            let channel = |suffix: &str| -> Result<ScalarMap, IngestError> {
                let path = require(stem.with_extension(format!("{suffix}.pfm")), hint)?;
                Ok(read_pfm(&path)?)
            };
            let x = channel("x")?;
            let y = channel("y")?;
            let z = channel("z")?;
            let conf_first = channel("cn")?;
            let conf_second = channel("cm")?;

            let same = x.same_shape(&y) && x.same_shape(&z);
            if !same {
                offenders.push(format!("pairs/{a}_{b}: x/y/z channel shapes disagree"));
                continue;
            }
            let (x1, x2) = split_stacked(&stem.with_extension("x.pfm"), &x)?;
            let (y1, y2) = split_stacked(&stem.with_extension("y.pfm"), &y)?;
            let (z1, z2) = split_stacked(&stem.with_extension("z.pfm"), &z)?;
            let dims = (x1.width(), x1.height());
            if conf_first.width() != dims.0
                || conf_first.height() != dims.1
                || conf_second.width() != dims.0
                || conf_second.height() != dims.1
            {
                offenders.push(format!(
                    "pairs/{a}_{b}: confidence {}x{} does not match pointmap {}x{}",
                    conf_first.width(),
                    conf_first.height(),
                    dims.0,
                    dims.1
                ));
            }
            match pair_dims {
                None => pair_dims = Some(dims),
                Some(expected) if expected != dims => offenders.push(format!(
                    "pairs/{a}_{b} is {}x{}, expected {}x{}",
                    dims.0, dims.1, expected.0, expected.1
                )),
                _ => {}
            }
            pairs.push(PairPrediction {
                edge: (a, b),
                pointmap_first: pointmap_from_channels(&x1, &y1, &z1),
                pointmap_second: pointmap_from_channels(&x2, &y2, &z2),
                confidence_first: conf_first,
                confidence_second: conf_second,
            });
        }
    }
    if let Some((pw, ph)) = pair_dims {
        if pw.max(ph) > PAIR_LONG_SIDE_LIMIT {
            log::warn!(
                "pair grids are {pw}x{ph}; upstream pairwise models expect the longer \
                 side to stay within {PAIR_LONG_SIDE_LIMIT} pixels"
            );
        }
    }

    let mut mono = Vec::with_capacity(n);
    for k in 0..n {
        let path = require(
            dir.join("mono").join(format!("view_{k}.pfm")),
            "mono depth comes from the synthetic oracle (`sparsesplat synth`) or from a \
             converted mono-depth model output (see the README)",
        )?;
        let map = read_pfm(&path)?;
        if map.width() != iw || map.height() != ih {
            offenders.push(format!(
                "mono/view_{k}.pfm is {}x{}, expected image resolution {iw}x{ih}",
                map.width(),
                map.height()
            ));
        }
        mono.push(map);
    }

    if !offenders.is_empty() {
        return Err(IngestError::Resolution { offenders });
    }

    let gt_path = dir.join("gt").join("poses.json");
    let gt_poses = if gt_path.exists() {
        let poses = read_poses(&gt_path)?;
        if poses.len() != n {
            return Err(IngestError::PoseCount {
                path: gt_path,
                got: poses.len(),
                expected: n,
            });
        }
        Some(poses)
    } else {
        None
    };

    let mut test_images = Vec::new();
    loop {
        let path = dir
            .join("test")
            .join("images")
            .join(format!("view_{}.png", test_images.len()));
        if !path.exists() {
            break;
        }
        test_images.push(read_image(&path)?);
    }
    let test_pose_path = dir.join("test").join("poses.json");
    let test_poses = if test_pose_path.exists() {
        let poses = read_poses(&test_pose_path)?;
        if poses.len() != test_images.len() {
            return Err(IngestError::PoseCount {
                path: test_pose_path,
                got: poses.len(),
                expected: test_images.len(),
            });
        }
        Some(poses)
    } else {
        None
    };

    Ok(SceneBundle {
        config,
        images,
        pairs,
        mono,
        gt_poses,
        test_images,
        test_poses,
    })
}

/// Human-readable validation summary for `ingest-check`.
pub fn describe(bundle: &SceneBundle) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "views: {} training at {}x{}, {} held-out\n",
        bundle.images.len(),
        bundle.image_width(),
        bundle.image_height(),
        bundle.test_images.len(),
    ));
    out.push_str(&format!(
        "pairs: {} predictions on {}x{} grids\n",
        bundle.pairs.len(),
        bundle.pair_width(),
        bundle.pair_height(),
    ));
    out.push_str(&format!(
        "mono depth: {} maps\nground-truth poses: {}\n",
        bundle.mono.len(),
        if bundle.gt_poses.is_some() { "yes" } else { "no" },
    ));
    out
}
