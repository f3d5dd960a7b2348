//! Global alignment of pairwise pointmaps into one consistent point cloud
//! with per-view poses and depths.
//!
//! Every unordered image pair contributes two pointmaps expressed in the
//! first view's frame, plus per-pixel confidences. A per-edge similarity
//! `(sigma_e, T_e)` and per-view `(T_n, D_n)` are optimized so that the
//! globally reparameterized points `chi_n = T_n^{-1}(K^{-1} p * D_n)` match
//! the rescaled pointmaps under the confidence-weighted sum of residual
//! norms. The scale gauge is pinned by keeping the product of edge scales at
//! exactly one, and view 0 is pinned to the identity pose.
//!
//! The solver is first-order: diagonally preconditioned gradient descent on
//! a Charbonnier-smoothed objective with a backtracking line search that
//! accepts on the true (unsmoothed) objective, so the reported objective is
//! non-increasing across accepted steps.

use nalgebra::Vector3;
use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::grid::{PointMap, ScalarMap};
use crate::pose::{Pose, Twist};
use crate::registration::{fit_similarity, resect_point_to_ray, RegistrationError};

/// Pairwise prediction for the ordered pair `(first, second)`: both pointmaps
/// live in the first view's camera frame, at an arbitrary per-pair scale.
#[derive(Debug, Clone)]
pub struct PairPrediction {
    pub edge: (usize, usize),
    pub pointmap_first: PointMap,
    pub pointmap_second: PointMap,
    pub confidence_first: ScalarMap,
    pub confidence_second: ScalarMap,
}

impl PairPrediction {
    fn validate(&self) -> Result<(), AlignError> {
        let (n, m) = self.edge;
        if n >= m {
            return Err(AlignError::BadEdge(n, m));
        }
        let w = self.pointmap_first.width();
        let h = self.pointmap_first.height();
        let shapes_ok = self.pointmap_second.width() == w
            && self.pointmap_second.height() == h
            && self.confidence_first.width() == w
            && self.confidence_first.height() == h
            && self.confidence_second.width() == w
            && self.confidence_second.height() == h;
        if !shapes_ok {
            return Err(AlignError::ShapeMismatch(n, m));
        }
        self.pointmap_first
            .validate_finite()
            .map_err(|_| AlignError::NonFinitePointmap(n, m))?;
        self.pointmap_second
            .validate_finite()
            .map_err(|_| AlignError::NonFinitePointmap(n, m))?;
        self.confidence_first
            .validate_confidence()
            .map_err(|_| AlignError::BadConfidence(n, m))?;
        self.confidence_second
            .validate_confidence()
            .map_err(|_| AlignError::BadConfidence(n, m))?;
        Ok(())
    }
}

/// Complete pairwise coverage of `n_views` images, one prediction per
/// unordered pair.
#[derive(Debug, Clone)]
pub struct ViewGraph {
    n_views: usize,
    pairs: Vec<PairPrediction>,
    width: usize,
    height: usize,
}

impl ViewGraph {
    pub fn new(n_views: usize, pairs: Vec<PairPrediction>) -> Result<Self, AlignError> {
        if n_views < 2 {
            return Err(AlignError::TooFewViews(n_views));
        }
        let expected = n_views * (n_views - 1) / 2;
        if pairs.len() != expected {
            return Err(AlignError::NotComplete {
                expected,
                got: pairs.len(),
            });
        }
        let mut seen = vec![false; n_views * n_views];
        for pair in &pairs {
            pair.validate()?;
            let (n, m) = pair.edge;
            if m >= n_views {
                return Err(AlignError::BadEdge(n, m));
            }
            if seen[n * n_views + m] {
                return Err(AlignError::DuplicateEdge(n, m));
            }
            seen[n * n_views + m] = true;
        }
        let width = pairs[0].pointmap_first.width();
        let height = pairs[0].pointmap_first.height();
        for pair in &pairs {
            if pair.pointmap_first.width() != width || pair.pointmap_first.height() != height {
                return Err(AlignError::ShapeMismatch(pair.edge.0, pair.edge.1));
            }
        }
        Ok(Self {
            n_views,
            pairs,
            width,
            height,
        })
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn pairs(&self) -> &[PairPrediction] {
        &self.pairs
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Solver iterations after the closed-form seed.
    pub iterations: usize,
    /// Upper bound for the first line-search step.
    pub initial_step: f64,
    /// Multiplicative decay applied to the step bound every iteration.
    pub step_decay: f64,
    /// Charbonnier smoothing width at iteration 0, as a fraction of the
    /// scene scale.
    pub smoothing_start: f64,
    /// Per-iteration decay of the smoothing width.
    pub smoothing_decay: f64,
    /// Smoothing width floor, as a fraction of the scene scale.
    pub smoothing_floor: f64,
    /// Minimum count of usable pixels per pair.
    pub min_pair_pixels: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            initial_step: 1.0,
            step_decay: 0.997,
            smoothing_start: 1e-3,
            smoothing_decay: 0.97,
            smoothing_floor: 1e-12,
            min_pair_pixels: 100,
        }
    }
}

/// Aligned result: per-edge similarities, per-view poses and depths. The
/// global points are always derived from `(view_poses, depths, intrinsics)`
/// through [`GlobalAlignmentState::global_points`]; they are never stored
/// independently.
#[derive(Debug, Clone)]
pub struct GlobalAlignmentState {
    pub intrinsics: CameraIntrinsics,
    pub edge_poses: Vec<Pose>,
    pub edge_scales: Vec<f64>,
    pub view_poses: Vec<Pose>,
    pub depths: Vec<ScalarMap>,
}

impl GlobalAlignmentState {
    /// World-frame points of one view's pixels via the depth
    /// reparameterization: `T_n^{-1}` applied to the unprojected depth map.
    pub fn global_points(&self, view: usize) -> PointMap {
        let pose_inv = self.view_poses[view].inverse();
        let depth = &self.depths[view];
        let intr = &self.intrinsics;
        PointMap::from_fn(depth.width(), depth.height(), |x, y| {
            let d = depth.at(x, y);
            pose_inv.apply(&intr.unproject_unchecked([x as f64, y as f64], d))
        })
    }

    /// The confidence-weighted sum of residual norms over every edge, view
    /// slot and pixel.
    pub fn objective(&self, graph: &ViewGraph) -> f64 {
        let chi: Vec<PointMap> = (0..graph.n_views()).map(|v| self.global_points(v)).collect();
        let mut total = 0.0;
        for (ei, pair) in graph.pairs().iter().enumerate() {
            let sigma = self.edge_scales[ei];
            let t_e = &self.edge_poses[ei];
            for (view, pm, conf) in [
                (pair.edge.0, &pair.pointmap_first, &pair.confidence_first),
                (pair.edge.1, &pair.pointmap_second, &pair.confidence_second),
            ] {
                for y in 0..pm.height() {
                    for x in 0..pm.width() {
                        let c = conf.at(x, y);
                        if c <= 0.0 {
                            continue;
                        }
                        let target = sigma * t_e.apply(&pm.at(x, y));
                        total += c * (chi[view].at(x, y) - target).norm();
                    }
                }
            }
        }
        total
    }

    /// Product of the per-edge scales; pinned to 1 by the gauge projection.
    pub fn scale_product(&self) -> f64 {
        self.edge_scales.iter().product()
    }
}

/// Per-iteration record of the run: true objective after the step, gauge
/// product, and whether a step was accepted.
#[derive(Debug, Clone, Default)]
pub struct AlignTrace {
    pub objective: Vec<f64>,
    pub sigma_product: Vec<f64>,
    pub accepted: Vec<bool>,
}

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("graph is not complete: expected {expected} pairs, got {got}")]
    NotComplete { expected: usize, got: usize },
    #[error("duplicate prediction for pair ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("invalid edge ({0}, {1})")]
    BadEdge(usize, usize),
    #[error("grids of pair ({0}, {1}) disagree in shape")]
    ShapeMismatch(usize, usize),
    #[error("pointmap of pair ({0}, {1}) contains non-finite entries")]
    NonFinitePointmap(usize, usize),
    #[error("confidence of pair ({0}, {1}) is invalid")]
    BadConfidence(usize, usize),
    #[error("pair ({edge_first}, {edge_second}) has {pixels} usable pixels, need {needed}")]
    InsufficientSignal {
        edge_first: usize,
        edge_second: usize,
        pixels: usize,
        needed: usize,
    },
    #[error("initialization failed: {0}")]
    Initialization(#[from] RegistrationError),
    #[error("optimization diverged after {} iterations", trace.objective.len())]
    OptimizationFailure { trace: AlignTrace },
}

// ---------------------------------------------------------------------------
// Solver internals
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct SolverState {
    log_sigma: Vec<f64>,
    edge_poses: Vec<Pose>,
    view_poses: Vec<Pose>,
    log_depths: Vec<Vec<f64>>,
}

#[derive(Clone)]
struct ParamVec {
    log_sigma: Vec<f64>,
    edge: Vec<[f64; 6]>,
    view: Vec<[f64; 6]>,
    depth: Vec<Vec<f64>>,
}

impl ParamVec {
    fn zeros_like(state: &SolverState) -> Self {
        Self {
            log_sigma: vec![0.0; state.log_sigma.len()],
            edge: vec![[0.0; 6]; state.edge_poses.len()],
            view: vec![[0.0; 6]; state.view_poses.len()],
            depth: state.log_depths.iter().map(|d| vec![0.0; d.len()]).collect(),
        }
    }

    fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for &v in &self.log_sigma {
            m = m.max(v.abs());
        }
        for e in &self.edge {
            for &v in e {
                m = m.max(v.abs());
            }
        }
        for e in &self.view {
            for &v in e {
                m = m.max(v.abs());
            }
        }
        for d in &self.depth {
            for &v in d {
                m = m.max(v.abs());
            }
        }
        m
    }
}

struct Problem<'a> {
    graph: &'a ViewGraph,
    rays: Vec<Vector3<f64>>,
}

impl<'a> Problem<'a> {
    fn new(graph: &'a ViewGraph, intrinsics: CameraIntrinsics) -> Self {
        let (w, h) = (graph.width(), graph.height());
        let mut rays = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                rays.push(intrinsics.ray([x as f64, y as f64]));
            }
        }
        Self { graph, rays }
    }

    fn pixel_count(&self) -> usize {
        self.rays.len()
    }

    /// Camera-frame points `ray * depth` for one view.
    fn camera_points(&self, state: &SolverState, view: usize) -> Vec<Vector3<f64>> {
        state.log_depths[view]
            .iter()
            .zip(&self.rays)
            .map(|(&d, ray)| ray * d.exp())
            .collect()
    }

    fn chi(&self, state: &SolverState) -> Vec<Vec<Vector3<f64>>> {
        (0..self.graph.n_views())
            .map(|v| {
                let inv = state.view_poses[v].inverse();
                self.camera_points(state, v)
                    .iter()
                    .map(|q| inv.apply(q))
                    .collect()
            })
            .collect()
    }

    fn true_objective(&self, state: &SolverState) -> f64 {
        let chi = self.chi(state);
        let mut total = 0.0;
        for (ei, pair) in self.graph.pairs().iter().enumerate() {
            let sigma = state.log_sigma[ei].exp();
            let t_e = &state.edge_poses[ei];
            for (view, pm, conf) in [
                (pair.edge.0, &pair.pointmap_first, &pair.confidence_first),
                (pair.edge.1, &pair.pointmap_second, &pair.confidence_second),
            ] {
                let chi_v = &chi[view];
                for (i, (p, &c)) in pm.points().iter().zip(conf.values()).enumerate() {
                    if c <= 0.0 {
                        continue;
                    }
                    let target = sigma * t_e.apply(p);
                    total += c * (chi_v[i] - target).norm();
                }
            }
        }
        total
    }

    /// Gradient and diagonal curvature of the Charbonnier-smoothed objective.
    fn gradient(&self, state: &SolverState, eps: f64) -> (ParamVec, ParamVec) {
        let mut grad = ParamVec::zeros_like(state);
        let mut curv = ParamVec::zeros_like(state);
        let cam_points: Vec<Vec<Vector3<f64>>> = (0..self.graph.n_views())
            .map(|v| self.camera_points(state, v))
            .collect();
        let chi: Vec<Vec<Vector3<f64>>> = (0..self.graph.n_views())
            .map(|v| {
                let inv = state.view_poses[v].inverse();
                cam_points[v].iter().map(|q| inv.apply(q)).collect()
            })
            .collect();
        let eps2 = eps * eps;

        for (ei, pair) in self.graph.pairs().iter().enumerate() {
            let sigma = state.log_sigma[ei].exp();
            let t_e = state.edge_poses[ei];
            for (view, pm, conf) in [
                (pair.edge.0, &pair.pointmap_first, &pair.confidence_first),
                (pair.edge.1, &pair.pointmap_second, &pair.confidence_second),
            ] {
                let r_v = state.view_poses[view].rotation;
                for (i, (p, &c)) in pm.points().iter().zip(conf.values()).enumerate() {
                    if c <= 0.0 {
                        continue;
                    }
                    let y = sigma * t_e.apply(p);
                    let r = chi[view][i] - y;
                    let cw = c / (r.norm_squared() + eps2).sqrt();
                    let rho = cw * r;
                    let q = cam_points[view][i];
                    let rv_rho = r_v * rho;
                    let depth = state.log_depths[view][i].exp();
                    let ray = self.rays[i];

                    // Edge scale (log parameterization).
                    grad.log_sigma[ei] -= rho.dot(&y);
                    curv.log_sigma[ei] += cw * y.norm_squared();

                    // Edge pose, left-trivialized.
                    let yxr = y.cross(&rho);
                    grad.edge[ei][0] -= yxr.x;
                    grad.edge[ei][1] -= yxr.y;
                    grad.edge[ei][2] -= yxr.z;
                    grad.edge[ei][3] -= sigma * rho.x;
                    grad.edge[ei][4] -= sigma * rho.y;
                    grad.edge[ei][5] -= sigma * rho.z;
                    curv.edge[ei][0] += cw * (y.y * y.y + y.z * y.z);
                    curv.edge[ei][1] += cw * (y.x * y.x + y.z * y.z);
                    curv.edge[ei][2] += cw * (y.x * y.x + y.y * y.y);
                    curv.edge[ei][3] += cw * sigma * sigma;
                    curv.edge[ei][4] += cw * sigma * sigma;
                    curv.edge[ei][5] += cw * sigma * sigma;

                    // View pose (view 0 stays pinned; its direction is zeroed
                    // when the step is formed).
                    let qx = q.cross(&rv_rho);
                    grad.view[view][0] -= qx.x;
                    grad.view[view][1] -= qx.y;
                    grad.view[view][2] -= qx.z;
                    grad.view[view][3] -= rv_rho.x;
                    grad.view[view][4] -= rv_rho.y;
                    grad.view[view][5] -= rv_rho.z;
                    curv.view[view][0] += cw * (q.y * q.y + q.z * q.z);
                    curv.view[view][1] += cw * (q.x * q.x + q.z * q.z);
                    curv.view[view][2] += cw * (q.x * q.x + q.y * q.y);
                    curv.view[view][3] += cw;
                    curv.view[view][4] += cw;
                    curv.view[view][5] += cw;

                    // Per-pixel log depth.
                    grad.depth[view][i] += rv_rho.dot(&ray) * depth;
                    curv.depth[view][i] += cw * ray.norm_squared() * depth * depth;
                }
            }
        }
        (grad, curv)
    }

    /// Applies `step * direction` and re-centers the log scales so the scale
    /// product stays exactly one.
    fn advance(&self, state: &SolverState, dir: &ParamVec, step: f64) -> SolverState {
        let mut next = state.clone();
        for (s, d) in next.log_sigma.iter_mut().zip(&dir.log_sigma) {
            *s += step * d;
        }
        let mean = next.log_sigma.iter().sum::<f64>() / next.log_sigma.len() as f64;
        for s in next.log_sigma.iter_mut() {
            *s -= mean;
        }
        for (pose, d) in next.edge_poses.iter_mut().zip(&dir.edge) {
            let delta = Twist::from_array([
                step * d[0],
                step * d[1],
                step * d[2],
                step * d[3],
                step * d[4],
                step * d[5],
            ]);
            *pose = pose.perturbed(&delta);
        }
        for (v, (pose, d)) in next.view_poses.iter_mut().zip(&dir.view).enumerate() {
            if v == 0 {
                continue;
            }
            let delta = Twist::from_array([
                step * d[0],
                step * d[1],
                step * d[2],
                step * d[3],
                step * d[4],
                step * d[5],
            ]);
            *pose = pose.perturbed(&delta);
        }
        for (depths, dd) in next.log_depths.iter_mut().zip(&dir.depth) {
            for (d, delta) in depths.iter_mut().zip(dd) {
                *d += step * delta;
            }
        }
        next
    }
}

fn signal_pixels(pair: &PairPrediction) -> usize {
    let mut pooled: Vec<f64> = pair
        .confidence_first
        .values()
        .iter()
        .chain(pair.confidence_second.values())
        .copied()
        .collect();
    pooled.sort_by(|a, b| a.total_cmp(b));
    let p10 = pooled[(pooled.len() - 1) / 10];
    pooled.iter().filter(|&&c| c >= p10 && c > 0.0).count()
}

fn mean_confidence(map: &ScalarMap) -> f64 {
    map.values().iter().sum::<f64>() / map.len() as f64
}

/// Closed-form seed: chain pairwise similarity registrations along a
/// maximum-confidence spanning tree, resect the one view that never appears
/// in its own frame, then fit every edge similarity against the implied
/// global points. Exact on noise-free pointmaps.
fn initialize(problem: &Problem, config: &AlignConfig) -> Result<SolverState, AlignError> {
    let graph = problem.graph;
    let n = graph.n_views();

    for pair in graph.pairs() {
        let usable = signal_pixels(pair);
        if usable < config.min_pair_pixels {
            return Err(AlignError::InsufficientSignal {
                edge_first: pair.edge.0,
                edge_second: pair.edge.1,
                pixels: usable,
                needed: config.min_pair_pixels,
            });
        }
    }

    // Highest-confidence edge in which each view appears in its own frame.
    let mut own_edge: Vec<Option<usize>> = vec![None; n];
    for (ei, pair) in graph.pairs().iter().enumerate() {
        let score = mean_confidence(&pair.confidence_first);
        let slot = &mut own_edge[pair.edge.0];
        let better = match slot {
            None => true,
            Some(prev) => score > mean_confidence(&graph.pairs()[*prev].confidence_first),
        };
        if better {
            *slot = Some(ei);
        }
    }

    // Maximum mean-confidence spanning tree (Kruskal, ties by edge index).
    let mut order: Vec<usize> = (0..graph.pairs().len()).collect();
    let scores: Vec<f64> = graph
        .pairs()
        .iter()
        .map(|p| 0.5 * (mean_confidence(&p.confidence_first) + mean_confidence(&p.confidence_second)))
        .collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &ei in &order {
        let (a, b) = graph.pairs()[ei].edge;
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            adjacency[a].push(ei);
            adjacency[b].push(ei);
        }
    }

    let px = problem.pixel_count();
    let mut chi: Vec<Option<Vec<Vector3<f64>>>> = vec![None; n];
    let mut poses: Vec<Option<Pose>> = vec![None; n];

    let root_edge = own_edge[0].expect("view 0 leads at least one pair");
    let root_pair = &graph.pairs()[root_edge];
    chi[0] = Some(root_pair.pointmap_first.points().to_vec());
    poses[0] = Some(Pose::identity());

    // Breadth-first chaining over the tree.
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(v) = queue.pop_front() {
        for &ei in &adjacency[v] {
            let pair = &graph.pairs()[ei];
            let (a, b) = pair.edge;
            let child = if a == v { b } else { a };
            if chi[child].is_some() {
                continue;
            }
            let (parent_pm, parent_conf, child_pm, child_conf) = if a == v {
                (
                    &pair.pointmap_first,
                    &pair.confidence_first,
                    &pair.pointmap_second,
                    &pair.confidence_second,
                )
            } else {
                (
                    &pair.pointmap_second,
                    &pair.confidence_second,
                    &pair.pointmap_first,
                    &pair.confidence_first,
                )
            };
            let to_world = fit_similarity(
                parent_pm.points(),
                chi[v].as_ref().unwrap(),
                Some(parent_conf.values()),
                true,
            )?;
            let child_world: Vec<Vector3<f64>> =
                child_pm.points().iter().map(|p| to_world.apply(p)).collect();

            let pose = match own_edge[child] {
                Some(own) => {
                    let own_pair = &graph.pairs()[own];
                    fit_similarity(
                        &child_world,
                        own_pair.pointmap_first.points(),
                        Some(own_pair.confidence_first.values()),
                        true,
                    )?
                    .rigid_part()
                }
                // The last view never appears in its own frame; resect it
                // against its pixel rays, seeded from the parent's pose.
                None => resect_point_to_ray(
                    &child_world,
                    &problem.rays,
                    child_conf.values(),
                    poses[v].as_ref().expect("parent pose"),
                    2000,
                )?,
            };
            poses[child] = Some(pose);
            chi[child] = Some(child_world);
            queue.push_back(child);
        }
    }

    let view_poses: Vec<Pose> = poses.into_iter().map(|p| p.expect("spanning tree")).collect();

    // Depths from the camera-frame z of the chained points, then the
    // canonical chi recomputed through the depth reparameterization.
    let mut scene_scale = 0.0;
    for points in chi.iter().flatten() {
        for p in points {
            scene_scale += p.norm_squared();
        }
    }
    scene_scale = (scene_scale / (n * px) as f64).sqrt().max(1e-12);
    let depth_floor = 1e-6 * scene_scale;

    let mut log_depths: Vec<Vec<f64>> = Vec::with_capacity(n);
    for v in 0..n {
        let points = chi[v].as_ref().unwrap();
        let pose = &view_poses[v];
        log_depths.push(
            points
                .iter()
                .map(|p| pose.apply(p).z.max(depth_floor).ln())
                .collect(),
        );
    }

    let mut state = SolverState {
        log_sigma: vec![0.0; graph.pairs().len()],
        edge_poses: vec![Pose::identity(); graph.pairs().len()],
        view_poses,
        log_depths,
    };

    // Edge similarities against the canonical global points.
    let chi_canonical = problem.chi(&state);
    for (ei, pair) in graph.pairs().iter().enumerate() {
        let mut src: Vec<Vector3<f64>> = Vec::with_capacity(2 * px);
        let mut dst: Vec<Vector3<f64>> = Vec::with_capacity(2 * px);
        let mut weights: Vec<f64> = Vec::with_capacity(2 * px);
        for (view, pm, conf) in [
            (pair.edge.0, &pair.pointmap_first, &pair.confidence_first),
            (pair.edge.1, &pair.pointmap_second, &pair.confidence_second),
        ] {
            src.extend_from_slice(pm.points());
            dst.extend_from_slice(&chi_canonical[view]);
            weights.extend_from_slice(conf.values());
        }
        let sim = fit_similarity(&src, &dst, Some(&weights), true)?;
        state.log_sigma[ei] = sim.scale.ln();
        state.edge_poses[ei] = sim.rigid_part();
    }

    // Gauge: center the log scales and absorb the factor into depths and
    // view translations so the residuals are untouched.
    let mean = state.log_sigma.iter().sum::<f64>() / state.log_sigma.len() as f64;
    for s in state.log_sigma.iter_mut() {
        *s -= mean;
    }
    for depths in state.log_depths.iter_mut() {
        for d in depths.iter_mut() {
            *d -= mean;
        }
    }
    for pose in state.view_poses.iter_mut() {
        *pose = Pose::new(pose.rotation, pose.translation * (-mean).exp());
    }

    Ok(state)
}

/// Optimizes the pointmap-alignment objective over edge similarities, view
/// poses and per-pixel depths. Returns the aligned state plus the
/// per-iteration trace.
pub fn align_global(
    graph: &ViewGraph,
    intrinsics: &CameraIntrinsics,
    config: &AlignConfig,
) -> Result<(GlobalAlignmentState, AlignTrace), AlignError> {
    let problem = Problem::new(graph, *intrinsics);
    let mut state = initialize(&problem, config)?;

    let mut scene_scale = 0.0;
    for v in 0..graph.n_views() {
        for q in problem.camera_points(&state, v) {
            scene_scale += q.norm_squared();
        }
    }
    scene_scale = (scene_scale / (graph.n_views() * problem.pixel_count()) as f64)
        .sqrt()
        .max(1e-12);

    let mut trace = AlignTrace::default();
    let mut objective = problem.true_objective(&state);
    let initial_objective = objective.max(1e-300);
    trace.objective.push(objective);
    trace.sigma_product.push(sigma_product(&state));
    trace.accepted.push(true);

    let mut stalled = 0usize;
    for iter in 0..config.iterations {
        let eps = scene_scale
            * (config.smoothing_start * config.smoothing_decay.powi(iter as i32))
                .max(config.smoothing_floor);
        let (grad, curv) = problem.gradient(&state, eps);

        // Preconditioned direction, with view 0 pinned.
        let mut dir = ParamVec::zeros_like(&state);
        let mut curv_max: f64 = 0.0;
        for c in curv
            .log_sigma
            .iter()
            .chain(curv.edge.iter().flatten())
            .chain(curv.view.iter().flatten())
            .chain(curv.depth.iter().flatten())
        {
            curv_max = curv_max.max(*c);
        }
        if curv_max <= 0.0 {
            trace.objective.push(objective);
            trace.sigma_product.push(sigma_product(&state));
            trace.accepted.push(false);
            break;
        }
        let damping = 1e-9 * curv_max;
        for i in 0..dir.log_sigma.len() {
            dir.log_sigma[i] = -grad.log_sigma[i] / (curv.log_sigma[i] + damping);
        }
        for e in 0..dir.edge.len() {
            for k in 0..6 {
                dir.edge[e][k] = -grad.edge[e][k] / (curv.edge[e][k] + damping);
            }
        }
        for v in 1..dir.view.len() {
            for k in 0..6 {
                dir.view[v][k] = -grad.view[v][k] / (curv.view[v][k] + damping);
            }
        }
        for v in 0..dir.depth.len() {
            for i in 0..dir.depth[v].len() {
                dir.depth[v][i] = -grad.depth[v][i] / (curv.depth[v][i] + damping);
            }
        }
        if dir.max_abs() < 1e-15 {
            trace.objective.push(objective);
            trace.sigma_product.push(sigma_product(&state));
            trace.accepted.push(false);
            break;
        }

        // Backtracking on the true objective; the gauge projection is part of
        // the candidate, so acceptance is monotone end to end.
        let mut step = config.initial_step * config.step_decay.powi(iter as i32);
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = problem.advance(&state, &dir, step);
            let cand_obj = problem.true_objective(&candidate);
            if cand_obj.is_finite() && cand_obj <= objective {
                state = candidate;
                objective = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }

        trace.objective.push(objective);
        trace.sigma_product.push(sigma_product(&state));
        trace.accepted.push(accepted);

        if objective > 10.0 * initial_objective {
            return Err(AlignError::OptimizationFailure { trace });
        }
        stalled = if accepted { 0 } else { stalled + 1 };
        if stalled >= 3 {
            break;
        }
    }

    let (w, h) = (graph.width(), graph.height());
    let result = GlobalAlignmentState {
        intrinsics: *intrinsics,
        edge_poses: state.edge_poses.clone(),
        edge_scales: state.log_sigma.iter().map(|s| s.exp()).collect(),
        view_poses: state.view_poses.clone(),
        depths: state
            .log_depths
            .iter()
            .map(|d| {
                ScalarMap::from_values(w, h, d.iter().map(|v| v.exp()).collect())
                    .expect("depth grid shape")
            })
            .collect(),
    };
    Ok((result, trace))
}

fn sigma_product(state: &SolverState) -> f64 {
    state.log_sigma.iter().map(|s| s.exp()).product()
}

/// Per-view depth maps of an aligned state. Unprojecting these through the
/// view poses reproduces the global points bit-exactly because
/// [`GlobalAlignmentState::global_points`] is that same arithmetic path.
pub fn extract_depths(state: &GlobalAlignmentState) -> Vec<ScalarMap> {
    state.depths.clone()
}
