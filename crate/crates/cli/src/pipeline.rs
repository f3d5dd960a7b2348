//! Staged pipeline execution with resumable, disk-isolated stages.
//!
//! Every stage reads only the scene inputs and the persisted outputs of the
//! stages before it, and ends by writing a completion marker. Because the
//! full run also round-trips through disk at each boundary, rerunning with
//! `--skip-to` from any completed stage reproduces the remaining artifacts
//! byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sparsesplat_core::alignment::{align_global, AlignError, ViewGraph};
use sparsesplat_core::camera::CameraIntrinsics;
use sparsesplat_core::depth_align::{
    apply_fit, build_confidence, fit_affine, top_p_mask, DepthAlignError,
};
use sparsesplat_core::eval::{localize_test_view, pose_metrics, psnr, ssim, EvalError, Trajectory};
use sparsesplat_core::focal::{average_focal, estimate_focal, FocalError};
use sparsesplat_core::grid::ScalarMap;
use sparsesplat_core::inpaint::{DiffusionInpainter, Inpainter};
use sparsesplat_core::pose::{Pose, Twist};
use sparsesplat_core::spline::{sample_novel_poses, NovelPoseSet, SplineError};
use sparsesplat_core::splat::{init_from_points, GaussianCloud, InitConfig, SplatError};
use sparsesplat_core::synthesis::{synthesize, SynthesisError};
use sparsesplat_core::train::{
    coarse_stage, fine_stage, NovelSupervision, PoseSet, TraceRecord, TrainError,
};

use crate::config::{InpainterChoice, PipelineConfig};
use crate::external::ExternalInpainter;
use crate::formats::{
    atomic_write, read_cloud_f64, read_grid_f64, read_poses, write_cloud_f64, write_grid_f64,
    write_model, write_png, write_poses, FormatError,
};
use crate::scene::{ingest, IngestError, SceneBundle};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Focal(#[from] FocalError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    DepthAlign(#[from] DepthAlignError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Pfm(#[from] crate::pfm::PfmError),
    #[error("stage {0} has not completed; run it first or drop --skip-to")]
    MissingStage(Stage),
    #[error("camera error: {0}")]
    Camera(#[from] sparsesplat_core::camera::CameraError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Stage {
    /// Focal recovery, global pointmap alignment, cloud initialization.
    Init,
    /// Joint optimization on the training views.
    Coarse,
    /// Confidence-aware affine alignment of mono depth.
    DepthAlign,
    /// Novel-pose sampling, warping and inpainting.
    NovelViews,
    /// Joint optimization with novel-view supervision.
    Fine,
    /// Held-out localization and metrics.
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Init,
        Stage::Coarse,
        Stage::DepthAlign,
        Stage::NovelViews,
        Stage::Fine,
        Stage::Eval,
    ];

    fn name(&self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Coarse => "coarse",
            Stage::DepthAlign => "depth_align",
            Stage::NovelViews => "novel_views",
            Stage::Fine => "fine",
            Stage::Eval => "eval",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Serialize, Deserialize, Clone, Copy)]
struct IntrinsicsFile {
    focal_image: f64,
    width: usize,
    height: usize,
    focal_pair: f64,
    pair_width: usize,
    pair_height: usize,
}

#[derive(Serialize, Deserialize)]
struct PseudoFile {
    /// Row-major 4x4 world-to-camera matrices, one per successful view.
    poses: Vec<[[f64; 4]; 4]>,
    source_views: Vec<usize>,
    pose_indices: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize, Clone)]
pub struct Metrics {
    pub n_test_views: usize,
    pub psnr_per_view: Vec<f64>,
    pub ssim_per_view: Vec<f64>,
    pub psnr_mean: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub pose: Option<sparsesplat_core::eval::PoseMetrics>,
}

/// Paths of every persisted artifact inside a run directory.
pub struct RunPaths {
    pub out: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.out.join("stages").join(format!("{}.done", stage.name()))
    }

    pub fn intrinsics(&self) -> PathBuf {
        self.out.join("intrinsics.json")
    }

    pub fn poses_init(&self) -> PathBuf {
        self.out.join("init").join("poses.json")
    }

    fn init_depth(&self, view: usize) -> PathBuf {
        self.out.join("init").join(format!("depth_{view}.g8"))
    }

    fn init_cloud(&self) -> PathBuf {
        self.out.join("init").join("cloud.g8c")
    }

    fn coarse_cloud(&self) -> PathBuf {
        self.out.join("coarse").join("cloud.g8c")
    }

    pub fn poses_coarse(&self) -> PathBuf {
        self.out.join("coarse").join("poses.json")
    }

    fn coarse_trace(&self) -> PathBuf {
        self.out.join("coarse").join("trace.jsonl")
    }

    fn aligned_depth(&self, view: usize) -> PathBuf {
        self.out.join("depth_align").join(format!("depth_{view}.g8"))
    }

    fn fits(&self) -> PathBuf {
        self.out.join("depth_align").join("fits.json")
    }

    fn pseudo_meta(&self) -> PathBuf {
        self.out.join("novel_views").join("pseudo.json")
    }

    fn pseudo_image(&self, index: usize) -> PathBuf {
        self.out.join("novel_views").join(format!("pseudo_{index}.png"))
    }

    fn pseudo_mask(&self, index: usize) -> PathBuf {
        self.out.join("novel_views").join(format!("mask_{index}.png"))
    }

    fn fine_cloud(&self) -> PathBuf {
        self.out.join("fine").join("cloud.g8c")
    }

    pub fn poses_refined(&self) -> PathBuf {
        self.out.join("poses_refined.json")
    }

    pub fn model(&self) -> PathBuf {
        self.out.join("model.bin")
    }

    pub fn trace(&self) -> PathBuf {
        self.out.join("trace.jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics.json")
    }

    pub fn failure(&self) -> PathBuf {
        self.out.join("failure.json")
    }

    fn test_render(&self, index: usize) -> PathBuf {
        self.out.join("renders").join(format!("test_{index}.png"))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let bytes = serde_json::to_vec_pretty(value).expect("json serialization");
    atomic_write(path, &bytes).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        io_err(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
        )
    })
}

/// Runs the pipeline from `skip_to` (or from the start) and returns the final
/// metrics. On a stage failure a machine-readable report is persisted and the
/// error is returned.
pub fn run(
    scene_dir: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
    skip_to: Option<Stage>,
) -> Result<Metrics, PipelineError> {
    let paths = RunPaths::new(out_dir);
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let start = skip_to.unwrap_or(Stage::Init);
    for stage in Stage::ALL {
        if stage < start && !paths.marker(stage).exists() {
            return Err(PipelineError::MissingStage(stage));
        }
    }

    let bundle = ingest(scene_dir)?;
    config
        .save(&out_dir.join("config.json"))
        .map_err(|e| io_err(out_dir, std::io::Error::other(e.to_string())))?;

    let mut metrics = None;
    for stage in Stage::ALL {
        if stage < start {
            log::info!("stage {stage}: reusing persisted outputs");
            continue;
        }
        let _ = fs::remove_file(paths.marker(stage));
        let begun = Instant::now();
        let result = match stage {
            Stage::Init => stage_init(&paths, &bundle, config).map(|_| None),
            Stage::Coarse => stage_coarse(&paths, &bundle, config).map(|_| None),
            Stage::DepthAlign => stage_depth_align(&paths, &bundle, config).map(|_| None),
            Stage::NovelViews => stage_novel_views(&paths, &bundle, config).map(|_| None),
            Stage::Fine => stage_fine(&paths, &bundle, config).map(|_| None),
            Stage::Eval => stage_eval(&paths, &bundle, config).map(Some),
        };
        match result {
            Ok(m) => {
                if let Some(m) = m {
                    metrics = Some(m);
                }
                atomic_write(&paths.marker(stage), b"done\n")
                    .map_err(|e| io_err(&paths.marker(stage), e))?;
                log::info!("stage {stage}: done in {:.2?}", begun.elapsed());
            }
            Err(err) => {
                let report = serde_json::json!({
                    "stage": stage.name(),
                    "error": err.to_string(),
                });
                let _ = atomic_write(
                    &paths.failure(),
                    &serde_json::to_vec_pretty(&report).expect("failure report"),
                );
                return Err(err);
            }
        }
    }
    Ok(metrics.expect("eval stage sets metrics"))
}

fn load_intrinsics(paths: &RunPaths) -> Result<(CameraIntrinsics, CameraIntrinsics), PipelineError> {
    let file: IntrinsicsFile = read_json(&paths.intrinsics())?;
    Ok((
        CameraIntrinsics::new(file.focal_image, file.width, file.height)?,
        CameraIntrinsics::new(file.focal_pair, file.pair_width, file.pair_height)?,
    ))
}

/// Coarse construction: focal recovery, global pointmap alignment, optional
/// pose-noise injection, and Gaussian-cloud initialization.
fn stage_init(
    paths: &RunPaths,
    bundle: &SceneBundle,
    config: &PipelineConfig,
) -> Result<(), PipelineError> {
    let n = config.n_views;
    let graph = ViewGraph::new(n, bundle.pairs.clone())?;

    let per_pair: Vec<f64> = graph
        .pairs()
        .iter()
        .map(|p| estimate_focal(&p.pointmap_first, &p.confidence_first))
        .collect::<Result<_, _>>()?;
    let focal_pair = average_focal(&per_pair)?;
    let (pw, ph) = (graph.width(), graph.height());
    let (iw, ih) = (bundle.image_width(), bundle.image_height());
    let focal_image = focal_pair * iw as f64 / pw as f64;
    let pair_intr = CameraIntrinsics::new(focal_pair, pw, ph)?;
    write_json(
        &paths.intrinsics(),
        &IntrinsicsFile {
            focal_image,
            width: iw,
            height: ih,
            focal_pair,
            pair_width: pw,
            pair_height: ph,
        },
    )?;

    let (state, trace) = align_global(&graph, &pair_intr, &config.align)?;
    write_json(
        &paths.out.join("init").join("align_trace.json"),
        &serde_json::json!({
            "objective": trace.objective,
            "sigma_product": trace.sigma_product,
        }),
    )?;

    for v in 0..n {
        write_grid_f64(&paths.init_depth(v), &state.depths[v])?;
    }

    // World points with colors sampled from the training images.
    let mut points = Vec::with_capacity(n * pw * ph);
    for v in 0..n {
        let chi = state.global_points(v);
        let channels: Vec<ScalarMap> = (0..3).map(|c| bundle.images[v].channel(c)).collect();
        let sx = if pw > 1 { (iw - 1) as f64 / (pw - 1) as f64 } else { 0.0 };
        let sy = if ph > 1 { (ih - 1) as f64 / (ph - 1) as f64 } else { 0.0 };
        for y in 0..ph {
            for x in 0..pw {
                let color = [
                    channels[0].sample_bilinear(x as f64 * sx, y as f64 * sy),
                    channels[1].sample_bilinear(x as f64 * sx, y as f64 * sy),
                    channels[2].sample_bilinear(x as f64 * sx, y as f64 * sy),
                ];
                points.push((chi.at(x, y), color));
            }
        }
    }
    let cloud = init_from_points(
        &points,
        &InitConfig {
            max_gaussians: Some(config.max_gaussians),
            ..InitConfig::default()
        },
    )?;
    write_cloud_f64(&paths.init_cloud(), &cloud)?;

    // Initial poses, optionally perturbed by the configured noise.
    let mut poses = state.view_poses.clone();
    if let Some(noise) = &config.init_pose_noise {
        let diameter = scene_diameter(&cloud);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(500);
        for pose in poses.iter_mut() {
            let axis = random_unit(&mut rng);
            let direction = random_unit(&mut rng);
            let delta = Twist {
                rotation: axis * noise.rotation_deg.to_radians(),
                translation: direction * (noise.translation_frac * diameter),
            };
            *pose = pose.perturbed(&delta);
        }
    }
    write_poses(&paths.poses_init(), &poses)?;
    Ok(())
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn scene_diameter(cloud: &GaussianCloud) -> f64 {
    let mut lo = Vector3::from_element(f64::INFINITY);
    let mut hi = Vector3::from_element(f64::NEG_INFINITY);
    for p in &cloud.positions {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm().max(1e-9)
}

fn stage_coarse(
    paths: &RunPaths,
    bundle: &SceneBundle,
    config: &PipelineConfig,
) -> Result<(), PipelineError> {
    let (image_intr, _) = load_intrinsics(paths)?;
    let mut cloud = read_cloud_f64(&paths.init_cloud())?;
    let mut poses = PoseSet::new(read_poses(&paths.poses_init())?);
    let trace = coarse_stage(
        &mut cloud,
        &mut poses,
        &bundle.images,
        &bundle.mono,
        &image_intr,
        &config.schedule,
        &config.weights,
        &config.render,
    )?;
    write_cloud_f64(&paths.coarse_cloud(), &cloud)?;
    write_poses(&paths.poses_coarse(), &poses.all_effective())?;
    write_trace(&paths.coarse_trace(), &trace)?;
    Ok(())
}

fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<(), PipelineError> {
    let mut bytes = Vec::new();
    for record in records {
        serde_json::to_writer(&mut bytes, record).expect("trace serialization");
        bytes.push(b'\n');
    }
    atomic_write(path, &bytes).map_err(|e| io_err(path, e))
}

fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .map(|line| {
            serde_json::from_str(line).map_err(|e| {
                io_err(
                    path,
                    std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
                )
            })
        })
        .collect()
}

/// Confidence-aware depth alignment per view: pooled pairwise confidence,
/// top-P mask, closed-form affine fit in inverse-depth space.
fn stage_depth_align(
    paths: &RunPaths,
    bundle: &SceneBundle,
    config: &PipelineConfig,
) -> Result<(), PipelineError> {
    let (image_intr, _) = load_intrinsics(paths)?;
    let (iw, ih) = (image_intr.width, image_intr.height);
    let mut fits = Vec::new();
    for v in 0..config.n_views {
        let confidences: Vec<ScalarMap> = bundle
            .pairs
            .iter()
            .filter_map(|p| {
                if p.edge.0 == v {
                    Some(p.confidence_first.clone())
                } else if p.edge.1 == v {
                    Some(p.confidence_second.clone())
                } else {
                    None
                }
            })
            .collect();
        let pooled = build_confidence(&confidences)?;
        let pooled_up = pooled.upsample_bilinear(iw, ih);
        let mask = top_p_mask(&pooled_up, config.top_p)?;
        let coarse = read_grid_f64(&paths.init_depth(v))?;
        let coarse_up = coarse.upsample_bilinear(iw, ih);
        let fit = fit_affine(&coarse_up, &bundle.mono[v], &mask)?;
        let aligned = apply_fit(&bundle.mono[v], &fit)?;
        write_grid_f64(&paths.aligned_depth(v), &aligned)?;
        fits.push(serde_json::json!({
            "view": v,
            "scale": fit.scale,
            "shift": fit.shift,
            "retained_fraction": fit.retained_fraction,
        }));
    }
    write_json(&paths.fits(), &fits)?;
    Ok(())
}

fn make_inpainter(choice: &InpainterChoice) -> Box<dyn Inpainter> {
    match choice {
        InpainterChoice::Builtin => Box::new(DiffusionInpainter::default()),
        InpainterChoice::External { command } => Box::new(ExternalInpainter {
            command: command.clone(),
        }),
    }
}

/// Warped-image-guided inpainting: sample novel poses, warp, clean, fill.
fn stage_novel_views(
    paths: &RunPaths,
    bundle: &SceneBundle,
    config: &PipelineConfig,
) -> Result<(), PipelineError> {
    let (image_intr, _) = load_intrinsics(paths)?;
    let train_poses = read_poses(&paths.poses_coarse())?;
    let depths: Vec<ScalarMap> = (0..config.n_views)
        .map(|v| read_grid_f64(&paths.aligned_depth(v)))
        .collect::<Result<_, _>>()?;
    let pose_set = sample_novel_poses(&train_poses, config.samples_per_segment())?;
    let inpainter = make_inpainter(&config.inpainter);
    let result = synthesize(
        &bundle.images,
        &depths,
        &train_poses,
        &pose_set,
        &image_intr,
        inpainter.as_ref(),
        config.mask_clean_window,
    )?;

    let mut meta = PseudoFile {
        poses: Vec::new(),
        source_views: Vec::new(),
        pose_indices: Vec::new(),
    };
    for (j, view) in result.views.iter().enumerate() {
        let r = &view.pose.rotation;
        let t = &view.pose.translation;
        meta.poses.push([
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        meta.source_views.push(view.source_view);
        meta.pose_indices.push(view.pose_index);
        write_png(
            &paths.pseudo_image(j),
            view.warp.inpainted.as_ref().expect("synthesize fills"),
        )?;
        crate::formats::write_mask_png(&paths.pseudo_mask(j), &view.warp.cleaned_mask)?;
    }
    write_json(&paths.pseudo_meta(), &meta)?;
    if !result.failures.is_empty() {
        let failures: Vec<_> = result
            .failures
            .iter()
            .map(|(k, e)| serde_json::json!({ "pose_index": k, "error": e.to_string() }))
            .collect();
        write_json(&paths.out.join("novel_views").join("failures.json"), &failures)?;
    }
    Ok(())
}

fn stage_fine(
    paths: &RunPaths,
    bundle: &SceneBundle,
    config: &PipelineConfig,
) -> Result<(), PipelineError> {
    let (image_intr, _) = load_intrinsics(paths)?;
    let mut cloud = read_cloud_f64(&paths.coarse_cloud())?;
    let mut poses = PoseSet::new(read_poses(&paths.poses_coarse())?);

    let meta: PseudoFile = read_json(&paths.pseudo_meta())?;
    let mut novel = Vec::with_capacity(meta.poses.len());
    for (j, m) in meta.poses.iter().enumerate() {
        let rotation = nalgebra::Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        novel.push(NovelSupervision {
            pose: Pose::new(rotation, translation),
            image: crate::formats::read_image(&paths.pseudo_image(j))?,
        });
    }

    let fine_trace = fine_stage(
        &mut cloud,
        &mut poses,
        &bundle.images,
        &bundle.mono,
        &novel,
        &image_intr,
        &config.schedule,
        &config.weights,
        &config.render,
    )?;

    write_cloud_f64(&paths.fine_cloud(), &cloud)?;
    write_poses(&paths.poses_refined(), &poses.all_effective())?;
    write_model(&paths.model(), &cloud)?;

    let mut combined = read_trace(&paths.coarse_trace())?;
    combined.extend(fine_trace);
    write_trace(&paths.trace(), &combined)?;
    Ok(())
}

/// Held-out evaluation: localize each test view photometrically from the
/// nearest refined training pose, render, and score; training poses are
/// scored against ground truth when available.
fn stage_eval(
    paths: &RunPaths,
    bundle: &SceneBundle,
    config: &PipelineConfig,
) -> Result<Metrics, PipelineError> {
    let (image_intr, _) = load_intrinsics(paths)?;
    let cloud = read_cloud_f64(&paths.fine_cloud())?;
    let refined = read_poses(&paths.poses_refined())?;

    let mut psnr_per_view = Vec::new();
    let mut ssim_per_view = Vec::new();
    for (k, test_image) in bundle.test_images.iter().enumerate() {
        // Nearest refined training pose by camera-center distance seeds the
        // localization.
        let init = nearest_pose(&refined, bundle.test_poses.as_ref().map(|p| &p[k]));
        let pose = localize_test_view(
            &cloud,
            test_image,
            &init,
            &image_intr,
            &config.render,
            &config.localize,
        )?;
        let rendered =
            sparsesplat_core::splat::render(&cloud, &pose, &image_intr, &config.render);
        write_png(&paths.test_render(k), &rendered.color)?;
        psnr_per_view.push(psnr(&rendered.color, test_image)?);
        ssim_per_view.push(ssim(&rendered.color, test_image)?);
    }

    let pose = match &bundle.gt_poses {
        Some(gt) => Some(pose_metrics(
            &Trajectory::from_world_to_camera(&refined),
            &Trajectory::from_world_to_camera(gt),
        )?),
        None => None,
    };

    let mean = |v: &[f64]| -> Option<f64> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let metrics = Metrics {
        n_test_views: bundle.test_images.len(),
        psnr_mean: mean(&psnr_per_view),
        ssim_mean: mean(&ssim_per_view),
        psnr_per_view,
        ssim_per_view,
        pose,
    };
    write_json(&paths.metrics(), &metrics)?;
    Ok(metrics)
}

/// The refined training pose whose center is closest to the test view's (or
/// to the first training view when no ground truth hints exist).
fn nearest_pose(refined: &[Pose], test_gt: Option<&Pose>) -> Pose {
    match test_gt {
        Some(gt) => {
            let target = gt.camera_center();
            let mut best = refined[0];
            let mut best_d = f64::INFINITY;
            for p in refined {
                let d = (p.camera_center() - target).norm();
                if d < best_d {
                    best_d = d;
                    best = *p;
                }
            }
            best
        }
        None => refined[0],
    }
}

/// Renders a smooth novel trajectory through the refined poses as a PNG
/// sequence.
pub fn render_trajectory(
    run_dir: &Path,
    out_dir: &Path,
    frames: usize,
) -> Result<usize, PipelineError> {
    let paths = RunPaths::new(run_dir);
    let (image_intr, _) = load_intrinsics(&paths)?;
    let cloud = read_cloud_f64(&paths.fine_cloud())
        .or_else(|_| crate::formats::read_model(&paths.model()))?;
    let poses = read_poses(&paths.poses_refined())?;
    let segments = poses.len().saturating_sub(1).max(1);
    let per_segment = frames.div_ceil(segments).max(1);
    let set: NovelPoseSet = sample_novel_poses(&poses, per_segment)?;
    let mut written = 0;
    for (k, pose) in set.poses.iter().take(frames).enumerate() {
        let rendered =
            sparsesplat_core::splat::render(&cloud, pose, &image_intr, &Default::default());
        write_png(&out_dir.join(format!("frame_{k:04}.png")), &rendered.color)?;
        written += 1;
    }
    Ok(written)
}

/// Re-runs only the evaluation stage of an existing run.
pub fn evaluate_run(
    scene_dir: &Path,
    run_dir: &Path,
    config: &PipelineConfig,
) -> Result<Metrics, PipelineError> {
    let paths = RunPaths::new(run_dir);
    if !paths.marker(Stage::Fine).exists() {
        return Err(PipelineError::MissingStage(Stage::Fine));
    }
    let bundle = ingest(scene_dir)?;
    let metrics = stage_eval(&paths, &bundle, config)?;
    atomic_write(&paths.marker(Stage::Eval), b"done\n")
        .map_err(|e| io_err(&paths.marker(Stage::Eval), e))?;
    Ok(metrics)
}
