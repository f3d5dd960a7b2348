//! Synthetic-scene oracles for the global pointmap alignment: pair
//! predictions are built from known geometry with per-edge scales, so exact
//! recovery, gauge behavior and objective decrease can be checked against
//! ground truth.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsesplat_core::alignment::{
    align_global, AlignConfig, AlignError, PairPrediction, ViewGraph,
};
use sparsesplat_core::camera::CameraIntrinsics;
use sparsesplat_core::eval::{umeyama_align, Trajectory};
use sparsesplat_core::grid::{PointMap, ScalarMap};
use sparsesplat_core::pose::Pose;

struct SyntheticScene {
    intrinsics: CameraIntrinsics,
    gt_poses: Vec<Pose>,
    gt_depths: Vec<ScalarMap>,
    graph: ViewGraph,
}

/// Random per-pixel point sets per view, observed through every pair with a
/// per-edge scale. `edge_scales` must multiply to one for exact recovery.
fn build_scene(
    n_views: usize,
    width: usize,
    height: usize,
    focal: f64,
    edge_scales: &[f64],
    noise: f64,
    seed: u64,
) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intrinsics = CameraIntrinsics::new(focal, width, height).unwrap();

    // Cameras on an arc, looking at the scene center.
    let gt_poses: Vec<Pose> = (0..n_views)
        .map(|i| {
            let angle = -0.35 + 0.7 * i as f64 / (n_views - 1).max(1) as f64;
            let eye = Vector3::new(4.0 * angle.sin(), 0.4 * angle, -4.0 * angle.cos());
            Pose::look_at(
                &eye,
                &Vector3::new(0.0, 0.0, 0.5),
                &Vector3::new(0.0, -1.0, 0.0),
            )
        })
        .collect();

    let gt_depths: Vec<ScalarMap> = (0..n_views)
        .map(|_| ScalarMap::from_fn(width, height, |_, _| rng.gen_range(3.0..6.0)))
        .collect();

    // World points of every view's pixels.
    let world: Vec<Vec<Vector3<f64>>> = (0..n_views)
        .map(|v| {
            let inv = gt_poses[v].inverse();
            let mut pts = Vec::with_capacity(width * height);
            for y in 0..height {
                for x in 0..width {
                    let cam = intrinsics
                        .unproject_unchecked([x as f64, y as f64], gt_depths[v].at(x, y));
                    pts.push(inv.apply(&cam));
                }
            }
            pts
        })
        .collect();

    let mut pairs = Vec::new();
    let mut edge_index = 0;
    for n in 0..n_views {
        for m in n + 1..n_views {
            let scale = edge_scales[edge_index];
            edge_index += 1;
            let map_of = |v: usize, rng: &mut ChaCha8Rng| {
                PointMap::from_fn(width, height, |x, y| {
                    let p = scale * gt_poses[n].apply(&world[v][y * width + x]);
                    if noise > 0.0 {
                        p + Vector3::new(
                            rng.gen_range(-noise..noise),
                            rng.gen_range(-noise..noise),
                            rng.gen_range(-noise..noise),
                        )
                    } else {
                        p
                    }
                })
            };
            pairs.push(PairPrediction {
                edge: (n, m),
                pointmap_first: map_of(n, &mut rng),
                pointmap_second: map_of(m, &mut rng),
                confidence_first: ScalarMap::constant(width, height, 1.0),
                confidence_second: ScalarMap::constant(width, height, 1.0),
            });
        }
    }

    SyntheticScene {
        intrinsics,
        gt_poses,
        gt_depths,
        graph: ViewGraph::new(n_views, pairs).unwrap(),
    }
}

/// Largest relative rotation/translation error across view pairs, after
/// aligning the estimated trajectory onto the ground truth by similarity.
fn relative_pose_errors(est: &[Pose], gt: &[Pose]) -> (f64, f64) {
    let est_traj = Trajectory::from_world_to_camera(est);
    let gt_traj = Trajectory::from_world_to_camera(gt);
    let sim = umeyama_align(&est_traj, &gt_traj).unwrap();
    let mut max_rot: f64 = 0.0;
    let mut max_trans: f64 = 0.0;
    for i in 0..est.len() {
        for j in i + 1..est.len() {
            let scaled = |p: &Pose| Pose::new(p.rotation, p.translation * sim.scale);
            let rel_est = Pose::compose(&scaled(&est_traj.poses[i]).inverse(), &scaled(&est_traj.poses[j]));
            let rel_gt = Pose::compose(&gt_traj.poses[i].inverse(), &gt_traj.poses[j]);
            let err = Pose::compose(&rel_gt.inverse(), &rel_est);
            max_rot = max_rot.max(err.log().rotation.norm());
            max_trans = max_trans.max(err.translation.norm());
        }
    }
    (max_rot, max_trans)
}

#[test]
fn two_identical_views_align_to_identity() {
    let mut scene = build_scene(2, 20, 16, 22.0, &[1.0], 0.0, 1);
    // Make the second view literally the first.
    scene.gt_poses[1] = scene.gt_poses[0];
    let pair = &scene.graph.pairs()[0];
    let identical = PairPrediction {
        edge: (0, 1),
        pointmap_first: pair.pointmap_first.clone(),
        pointmap_second: pair.pointmap_first.clone(),
        confidence_first: pair.confidence_first.clone(),
        confidence_second: pair.confidence_second.clone(),
    };
    let graph = ViewGraph::new(2, vec![identical]).unwrap();
    let (state, _) = align_global(&graph, &scene.intrinsics, &AlignConfig::default()).unwrap();

    let rel = Pose::compose(&state.view_poses[1], &state.view_poses[0].inverse());
    assert!(
        rel.log().rotation.norm() < 1e-6,
        "relative rotation {}",
        rel.log().rotation.norm()
    );
    assert!(rel.translation.norm() < 1e-6);
    for &sigma in &state.edge_scales {
        assert!((sigma - 1.0).abs() < 1e-6);
    }
}

#[test]
fn three_views_with_ground_truth_scales_recover_relative_poses() {
    let scene = build_scene(3, 24, 18, 26.0, &[0.5, 1.0, 2.0], 0.0, 2);
    let (state, trace) =
        align_global(&scene.graph, &scene.intrinsics, &AlignConfig::default()).unwrap();

    let (rot_err, trans_err) = relative_pose_errors(&state.view_poses, &scene.gt_poses);
    assert!(rot_err < 1e-3, "relative rotation error {rot_err}");
    assert!(trans_err < 1e-3, "relative translation error {trans_err}");

    // Noise-free data reaches a vanishing objective.
    let objective = state.objective(&scene.graph);
    assert!(objective < 1e-8, "objective {objective}");

    // Gauge pinned at every iteration.
    for &p in &trace.sigma_product {
        assert!((p - 1.0).abs() < 1e-9, "scale product {p}");
    }
}

#[test]
fn four_views_reach_vanishing_objective() {
    // Product of the edge scales is one.
    let scales = [0.5, 1.25, 2.0, 0.8, 1.0, 1.0];
    let product: f64 = scales.iter().product();
    assert!((product - 1.0).abs() < 1e-12);
    let scene = build_scene(4, 24, 18, 26.0, &scales, 0.0, 3);
    let (state, trace) =
        align_global(&scene.graph, &scene.intrinsics, &AlignConfig::default()).unwrap();
    let objective = state.objective(&scene.graph);
    assert!(objective < 1e-8, "objective {objective}");

    // Accepted-step objectives never increase.
    for pair in trace.objective.windows(2) {
        assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "objective increased: {pair:?}");
    }
}

#[test]
fn depths_match_ground_truth_after_scale_normalization() {
    let scene = build_scene(3, 24, 18, 26.0, &[0.5, 1.0, 2.0], 0.0, 4);
    let (state, _) =
        align_global(&scene.graph, &scene.intrinsics, &AlignConfig::default()).unwrap();

    // Global scale from the median estimated-to-true ratio.
    let mut ratios = Vec::new();
    for v in 0..3 {
        for (d_est, d_gt) in state.depths[v].values().iter().zip(scene.gt_depths[v].values()) {
            ratios.push(d_est / d_gt);
        }
    }
    ratios.sort_by(|a, b| a.total_cmp(b));
    let scale = ratios[ratios.len() / 2];

    let mut rel_errors: Vec<f64> = Vec::new();
    for v in 0..3 {
        for (d_est, d_gt) in state.depths[v].values().iter().zip(scene.gt_depths[v].values()) {
            rel_errors.push((d_est / scale - d_gt).abs() / d_gt);
        }
    }
    rel_errors.sort_by(|a, b| a.total_cmp(b));
    let median = rel_errors[rel_errors.len() / 2];
    assert!(median < 0.01, "median relative depth error {median}");
}

#[test]
fn global_points_reproject_through_the_same_path() {
    let scene = build_scene(3, 16, 12, 18.0, &[1.0, 1.0, 1.0], 0.0, 5);
    let (state, _) =
        align_global(&scene.graph, &scene.intrinsics, &AlignConfig::default()).unwrap();
    let depths = sparsesplat_core::alignment::extract_depths(&state);
    for v in 0..3 {
        let chi = state.global_points(v);
        for y in 0..12 {
            for x in 0..16 {
                let cam = state.intrinsics.unproject_unchecked(
                    [x as f64, y as f64],
                    depths[v].at(x, y),
                );
                let world = state.view_poses[v].inverse().apply(&cam);
                // Same arithmetic path, so bit-exact.
                assert_eq!(world, chi.at(x, y));
            }
        }
    }
}

#[test]
fn per_pair_focals_average_to_the_shared_focal() {
    let scene = build_scene(4, 32, 24, 30.0, &[0.5, 1.25, 2.0, 0.8, 1.0, 1.0], 0.0, 9);
    let per_pair: Vec<f64> = scene
        .graph
        .pairs()
        .iter()
        .map(|p| {
            sparsesplat_core::focal::estimate_focal(&p.pointmap_first, &p.confidence_first)
                .unwrap()
        })
        .collect();
    // Pointmap scales cancel in the normalized image coordinates, so every
    // pair sees the same focal.
    let avg = sparsesplat_core::focal::average_focal(&per_pair).unwrap();
    assert!((avg - 30.0).abs() / 30.0 < 5e-3, "averaged focal {avg}");
}

#[test]
fn identity_state_reads_depth_at_the_principal_pixel() {
    use sparsesplat_core::alignment::GlobalAlignmentState;
    let intr = CameraIntrinsics::new(10.0, 9, 9).unwrap();
    let mut depth = ScalarMap::constant(9, 9, 1.0);
    depth.set(4, 4, 5.0);
    let state = GlobalAlignmentState {
        intrinsics: intr,
        edge_poses: vec![],
        edge_scales: vec![],
        view_poses: vec![Pose::identity()],
        depths: vec![depth],
    };
    let depths = sparsesplat_core::alignment::extract_depths(&state);
    assert_eq!(depths[0].at(4, 4), 5.0);
    // Principal point of a 9-wide image is (4.5, 4.5); the pixel ray at
    // (4, 4) carries the stored depth straight through the identity pose.
    let chi = state.global_points(0);
    assert_eq!(chi.at(4, 4).z, 5.0);
    assert_eq!(chi.at(4, 4), intr.unproject_unchecked([4.0, 4.0], 5.0));
}

#[test]
fn noisy_pointmaps_still_converge_monotonically() {
    let scene = build_scene(3, 20, 16, 22.0, &[0.8, 1.0, 1.25], 0.01, 6);
    let (state, trace) =
        align_global(&scene.graph, &scene.intrinsics, &AlignConfig::default()).unwrap();
    for pair in trace.objective.windows(2) {
        assert!(pair[1] <= pair[0] * (1.0 + 1e-12));
    }
    let (rot_err, trans_err) = relative_pose_errors(&state.view_poses, &scene.gt_poses);
    assert!(rot_err < 0.02, "relative rotation error {rot_err}");
    assert!(trans_err < 0.05, "relative translation error {trans_err}");
}

#[test]
fn insufficient_confidence_is_rejected() {
    let mut scene = build_scene(2, 12, 10, 14.0, &[1.0], 0.0, 7);
    let pair = scene.graph.pairs()[0].clone();
    let starved = PairPrediction {
        confidence_first: ScalarMap::constant(12, 10, 0.0),
        confidence_second: ScalarMap::from_fn(12, 10, |x, y| {
            if x < 3 && y < 3 {
                1.0
            } else {
                0.0
            }
        }),
        ..pair
    };
    scene.graph = ViewGraph::new(2, vec![starved]).unwrap();
    match align_global(&scene.graph, &scene.intrinsics, &AlignConfig::default()) {
        Err(AlignError::InsufficientSignal { pixels, .. }) => assert!(pixels < 100),
        other => panic!("expected insufficient signal, got {other:?}"),
    }
}

#[test]
fn incomplete_graphs_are_rejected() {
    let scene = build_scene(3, 12, 10, 14.0, &[0.5, 1.0, 2.0], 0.0, 8);
    let two_pairs = scene.graph.pairs()[..2].to_vec();
    match ViewGraph::new(3, two_pairs) {
        Err(AlignError::NotComplete { expected, got }) => {
            assert_eq!((expected, got), (3, 2));
        }
        other => panic!("expected completeness error, got {other:?}"),
    }
}
