//! Joint refinement of camera poses, triangulated points and the LiDAR-camera
//! extrinsic from reprojection, LiDAR point-to-plane and cross-modal
//! point-to-plane terms, plus the outer loop that re-associates as the
//! extrinsic improves.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, RowVector3, RowVector6, SymmetricEigen, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::association::{
    build_tracks, estimate_normals, pair_point_to_plane, spread_indices, triangulate_tracks, FeatureMatch, LiftIndex,
    Matcher, NormalConfig, PlaneIndex, PointPlanePair, TrackedPoint,
};
use crate::fsutil::fmt_f64;
use crate::geom::{point_jacobian, project_point, CameraIntrinsics, Pose};
use crate::ingest::{format_pose_fields, Frame, PointCloud};
use crate::posegraph::{
    filter_edges, initialize_poses, optimize_pose_graph, triangles, CycleConfig, EdgeStats, LmConfig, PoseGraph,
    PoseGraphError,
};
use crate::relmotion::{estimate_edge, RansacConfig, RelativeMotionEdge};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("need at least 2 frames, got {0}")]
    NotEnoughFrames(usize),
    #[error("no relative motion could be estimated between any frame pair")]
    NoEdges,
    #[error(transparent)]
    PoseGraph(#[from] PoseGraphError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointWeights {
    pub camera: f64,
    pub lidar: f64,
    pub joint: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        Self { camera: 1.0, lidar: 20.0, joint: 10.0 }
    }
}

/// Huber thresholds: pixels for reprojection, meters for point-to-plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberConfig {
    pub pixel: f64,
    pub metric: f64,
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self { pixel: 2.0, metric: 0.1 }
    }
}

/// A triangulated point paired with a local plane of the cloud of `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossPair {
    pub point: usize,
    pub frame: usize,
    pub plane_point: Vector3<f64>,
    pub plane_normal: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct JointProblem {
    pub intrinsics: CameraIntrinsics,
    /// World-to-camera poses.
    pub poses: Vec<Pose>,
    /// LiDAR-to-camera transform.
    pub extrinsic: Pose,
    pub points: Vec<TrackedPoint>,
    pub lidar_pairs: Vec<PointPlanePair>,
    pub cross_pairs: Vec<CrossPair>,
    pub weights: JointWeights,
    pub huber: Option<HuberConfig>,
    pub gauge: usize,
    pub optimize_extrinsic: bool,
}

impl JointProblem {
    pub fn new(intrinsics: CameraIntrinsics, poses: Vec<Pose>, extrinsic: Pose) -> Self {
        Self {
            intrinsics,
            poses,
            extrinsic,
            points: Vec::new(),
            lidar_pairs: Vec::new(),
            cross_pairs: Vec::new(),
            weights: JointWeights::default(),
            huber: Some(HuberConfig::default()),
            gauge: 0,
            optimize_extrinsic: true,
        }
    }
}

// ---------------------------------------------------------------- residuals and Jacobians

const MIN_DEPTH: f64 = 1e-6;

/// `project(K, T x) - u`, or `None` when the point is not in front of the camera.
pub fn camera_residual(k: &CameraIntrinsics, pose: &Pose, x: &Vector3<f64>, u: &Vector2<f64>) -> Option<Vector2<f64>> {
    let y = pose.transform_point(x);
    if y.z <= MIN_DEPTH {
        return None;
    }
    project_point(k, &y).ok().map(|(p, _)| p - u)
}

/// Jacobians of [`camera_residual`] with respect to the pose increment and the point.
pub fn camera_jacobians(
    k: &CameraIntrinsics,
    pose: &Pose,
    x: &Vector3<f64>,
) -> (nalgebra::Matrix2x6<f64>, nalgebra::Matrix2x3<f64>) {
    let y = pose.transform_point(x);
    let jp = k.projection_jacobian(&y);
    (jp * point_jacobian(&y), jp * pose.rotation)
}

/// `n^T (T_e^-1 T_j T_i^-1 T_e p - q)` for a pair with `p` in LiDAR-i and `(q, n)` in LiDAR-j.
pub fn lidar_residual(pair: &PointPlanePair, ti: &Pose, tj: &Pose, te: &Pose) -> f64 {
    let z = te.inverse().compose(tj).compose(&ti.inverse()).compose(te).transform_point(&pair.source_point);
    pair.residual(&z)
}

/// Row Jacobians of [`lidar_residual`] with respect to the increments of `T_i`, `T_j` and `T_e`.
pub fn lidar_jacobians(
    pair: &PointPlanePair,
    ti: &Pose,
    tj: &Pose,
    te: &Pose,
) -> (RowVector6<f64>, RowVector6<f64>, RowVector6<f64>) {
    let a = te.transform_point(&pair.source_point);
    let c = tj.transform_point(&ti.inverse().transform_point(&a));
    let nre = pair.plane_normal.transpose() * te.rotation.transpose();
    let chain = nre * tj.rotation * ti.rotation.transpose();
    let d_j = nre * point_jacobian(&c);
    let d_i = -(chain * point_jacobian(&a));
    let d_e = chain * point_jacobian(&a) - nre * point_jacobian(&c);
    (d_i, d_j, d_e)
}

/// `n^T (T_e^-1 T_i x - q)` for a world point `x` and a plane in LiDAR-i.
pub fn joint_residual(pair: &CrossPair, ti: &Pose, te: &Pose, x: &Vector3<f64>) -> f64 {
    let z = te.inverse().transform_point(&ti.transform_point(x));
    pair.plane_normal.dot(&(z - pair.plane_point))
}

/// Row Jacobians of [`joint_residual`] with respect to `T_i`, the point and `T_e`.
pub fn joint_jacobians(
    pair: &CrossPair,
    ti: &Pose,
    te: &Pose,
    x: &Vector3<f64>,
) -> (RowVector6<f64>, RowVector3<f64>, RowVector6<f64>) {
    let c = ti.transform_point(x);
    let nre = pair.plane_normal.transpose() * te.rotation.transpose();
    let d_i = nre * point_jacobian(&c);
    (d_i, nre * ti.rotation, -d_i)
}

/// Reprojection residuals of every observation, and how many were dropped for depth.
pub fn camera_residuals(problem: &JointProblem) -> (Vec<Vector2<f64>>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0;
    for tp in &problem.points {
        for (f, u) in &tp.observations {
            match camera_residual(&problem.intrinsics, &problem.poses[*f], &tp.world_point, u) {
                Some(r) => out.push(r),
                None => dropped += 1,
            }
        }
    }
    (out, dropped)
}

pub fn lidar_residuals(problem: &JointProblem) -> Vec<f64> {
    problem
        .lidar_pairs
        .iter()
        .map(|p| lidar_residual(p, &problem.poses[p.source_frame], &problem.poses[p.target_frame], &problem.extrinsic))
        .collect()
}

pub fn joint_residuals(problem: &JointProblem) -> Vec<f64> {
    problem
        .cross_pairs
        .iter()
        .map(|c| joint_residual(c, &problem.poses[c.frame], &problem.extrinsic, &problem.points[c.point].world_point))
        .collect()
}

/// Huber loss on a squared norm `s` and its derivative (the IRLS weight).
fn huber(s: f64, delta: Option<f64>) -> (f64, f64) {
    match delta {
        Some(d) if s > d * d => {
            let n = s.sqrt();
            (2.0 * d * n - d * d, d / n)
        }
        _ => (s, 1.0),
    }
}

/// Unweighted robust cost of each term and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JointCosts {
    pub camera: f64,
    pub lidar: f64,
    pub joint: f64,
    pub total: f64,
}

#[derive(Clone, Copy)]
struct State<'a> {
    poses: &'a [Pose],
    extrinsic: &'a Pose,
    points: &'a [Vector3<f64>],
}

fn evaluate_costs(problem: &JointProblem, st: State<'_>) -> JointCosts {
    let px = problem.huber.map(|h| h.pixel);
    let m = problem.huber.map(|h| h.metric);
    let camera: f64 = problem
        .points
        .par_iter()
        .zip(st.points.par_iter())
        .map(|(tp, x)| {
            tp.observations
                .iter()
                .filter_map(|(f, u)| camera_residual(&problem.intrinsics, &st.poses[*f], x, u))
                .map(|r| huber(r.norm_squared(), px).0)
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let lidar: f64 = problem
        .lidar_pairs
        .iter()
        .map(|p| {
            let r = lidar_residual(p, &st.poses[p.source_frame], &st.poses[p.target_frame], st.extrinsic);
            huber(r * r, m).0
        })
        .sum();
    let joint: f64 = problem
        .cross_pairs
        .iter()
        .map(|c| {
            let r = joint_residual(c, &st.poses[c.frame], st.extrinsic, &st.points[c.point]);
            huber(r * r, m).0
        })
        .sum();
    let w = &problem.weights;
    JointCosts { camera, lidar, joint, total: w.camera * camera + w.lidar * lidar + w.joint * joint }
}

pub fn joint_costs(problem: &JointProblem) -> JointCosts {
    let pts: Vec<Vector3<f64>> = problem.points.iter().map(|p| p.world_point).collect();
    evaluate_costs(problem, State { poses: &problem.poses, extrinsic: &problem.extrinsic, points: &pts })
}

// ---------------------------------------------------------------- normal equations

/// One scalar residual row with its weighted Jacobian pieces.
struct Row {
    r: f64,
    w: f64,
    cams: [(Option<usize>, RowVector6<f64>); 3],
    point: Option<(usize, RowVector3<f64>)>,
}

struct Layout {
    pose_block: Vec<Option<usize>>,
    extrinsic_block: Option<usize>,
    blocks: usize,
}

impl Layout {
    fn new(problem: &JointProblem) -> Self {
        let n = problem.poses.len();
        let mut pose_block = vec![None; n];
        let mut next = 0;
        for (i, b) in pose_block.iter_mut().enumerate() {
            if i != problem.gauge {
                *b = Some(next);
                next += 1;
            }
        }
        let w = &problem.weights;
        let uses_extrinsic = (w.lidar > 0.0 && !problem.lidar_pairs.is_empty())
            || (w.joint > 0.0 && !problem.cross_pairs.is_empty());
        let extrinsic_block = (problem.optimize_extrinsic && uses_extrinsic).then(|| {
            next += 1;
            next - 1
        });
        Self { pose_block, extrinsic_block, blocks: next }
    }
}

const NO_CAM: (Option<usize>, RowVector6<f64>) = (None, RowVector6::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0));

fn linearize(problem: &JointProblem, lay: &Layout, st: State<'_>) -> Vec<Row> {
    let px = problem.huber.map(|h| h.pixel);
    let m = problem.huber.map(|h| h.metric);
    let w = problem.weights;
    let k = &problem.intrinsics;
    let mut rows: Vec<Row> = Vec::new();
    if w.camera > 0.0 {
        let cam_rows: Vec<Vec<Row>> = problem
            .points
            .par_iter()
            .enumerate()
            .map(|(p, tp)| {
                let x = &st.points[p];
                let mut out = Vec::new();
                for (f, u) in &tp.observations {
                    let Some(r) = camera_residual(k, &st.poses[*f], x, u) else { continue };
                    let (_, hw) = huber(r.norm_squared(), px);
                    let (jp, jx) = camera_jacobians(k, &st.poses[*f], x);
                    for d in 0..2 {
                        out.push(Row {
                            r: r[d],
                            w: w.camera * hw,
                            cams: [(lay.pose_block[*f], jp.row(d).into_owned()), NO_CAM, NO_CAM],
                            point: Some((p, jx.row(d).into_owned())),
                        });
                    }
                }
                out
            })
            .collect();
        rows.extend(cam_rows.into_iter().flatten());
    }
    if w.lidar > 0.0 {
        rows.par_extend(problem.lidar_pairs.par_iter().map(|pair| {
            let (ti, tj) = (&st.poses[pair.source_frame], &st.poses[pair.target_frame]);
            let r = lidar_residual(pair, ti, tj, st.extrinsic);
            let (_, hw) = huber(r * r, m);
            let (di, dj, de) = lidar_jacobians(pair, ti, tj, st.extrinsic);
            Row {
                r,
                w: w.lidar * hw,
                cams: [
                    (lay.pose_block[pair.source_frame], di),
                    (lay.pose_block[pair.target_frame], dj),
                    (lay.extrinsic_block, de),
                ],
                point: None,
            }
        }));
    }
    if w.joint > 0.0 {
        rows.par_extend(problem.cross_pairs.par_iter().map(|c| {
            let ti = &st.poses[c.frame];
            let x = &st.points[c.point];
            let r = joint_residual(c, ti, st.extrinsic, x);
            let (_, hw) = huber(r * r, m);
            let (di, dx, de) = joint_jacobians(c, ti, st.extrinsic, x);
            Row {
                r,
                w: w.joint * hw,
                cams: [(lay.pose_block[c.frame], di), (lay.extrinsic_block, de), NO_CAM],
                point: Some((c.point, dx)),
            }
        }));
    }
    rows
}

struct Normal {
    hcc: DMatrix<f64>,
    gc: DVector<f64>,
    hpp: Vec<Matrix3<f64>>,
    gp: Vec<Vector3<f64>>,
    hcp: Vec<BTreeMap<usize, Matrix6x3<f64>>>,
}

fn assemble(rows: &[Row], lay: &Layout, n_points: usize) -> Normal {
    let dim = 6 * lay.blocks;
    let mut nm = Normal {
        hcc: DMatrix::zeros(dim, dim),
        gc: DVector::zeros(dim),
        hpp: vec![Matrix3::zeros(); n_points],
        gp: vec![Vector3::zeros(); n_points],
        hcp: vec![BTreeMap::new(); n_points],
    };
    for row in rows {
        // Merge Jacobian pieces that land on the same block (e.g. i == j).
        let mut cams: Vec<(usize, RowVector6<f64>)> = Vec::with_capacity(3);
        for (b, j) in &row.cams {
            let Some(b) = b else { continue };
            match cams.iter_mut().find(|(x, _)| x == b) {
                Some((_, acc)) => *acc += j,
                None => cams.push((*b, *j)),
            }
        }
        for (a, ja) in &cams {
            let mut g = nm.gc.fixed_rows_mut::<6>(6 * a);
            g += ja.transpose() * (row.w * row.r);
            for (b, jb) in &cams {
                let mut h = nm.hcc.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                h += ja.transpose() * jb * row.w;
            }
        }
        if let Some((p, jx)) = &row.point {
            nm.hpp[*p] += jx.transpose() * jx * row.w;
            nm.gp[*p] += jx.transpose() * (row.w * row.r);
            for (a, ja) in &cams {
                *nm.hcp[*p].entry(*a).or_insert_with(Matrix6x3::zeros) += ja.transpose() * jx * row.w;
            }
        }
    }
    nm
}

/// Reduced camera system after eliminating points with damping `lambda`.
fn reduced_system(nm: &Normal, lambda: f64) -> (DMatrix<f64>, DVector<f64>, Vec<Option<Matrix3<f64>>>) {
    let mut s = nm.hcc.clone();
    let dim = s.nrows();
    for k in 0..dim {
        s[(k, k)] += lambda * nm.hcc[(k, k)].max(1e-9);
    }
    let mut b = nm.gc.clone();
    let mut inv = Vec::with_capacity(nm.hpp.len());
    for (p, hpp) in nm.hpp.iter().enumerate() {
        let mut d = *hpp;
        for k in 0..3 {
            d[(k, k)] += lambda * hpp[(k, k)].max(1e-9);
        }
        let Some(hinv) = d.try_inverse() else {
            inv.push(None);
            continue;
        };
        let blocks: Vec<(&usize, &Matrix6x3<f64>)> = nm.hcp[p].iter().collect();
        for (a, ha) in &blocks {
            let t = *ha * hinv;
            let mut bb = b.fixed_rows_mut::<6>(6 * **a);
            bb -= t * nm.gp[p];
            for (c, hc) in &blocks {
                let mut blk = s.fixed_view_mut::<6, 6>(6 * **a, 6 * **c);
                blk -= t * hc.transpose();
            }
        }
        inv.push(Some(hinv));
    }
    (s, b, inv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointSolverConfig {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub gradient_tolerance: f64,
    pub initial_lambda: f64,
    /// Ratio of smallest to largest marginal information eigenvalue of the
    /// extrinsic below which it is reported as poorly constrained.
    pub degeneracy_ratio: f64,
}

impl Default for JointSolverConfig {
    fn default() -> Self {
        Self { max_iterations: 50, relative_tolerance: 1e-12, gradient_tolerance: 1e-10, initial_lambda: 1e-4, degeneracy_ratio: 1e-6 }
    }
}

/// Eigen-analysis of the extrinsic's marginal information matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrinsicObservability {
    /// Ascending eigenvalues.
    pub eigenvalues: Vector6<f64>,
    /// Eigenvector of the smallest eigenvalue, ordered (rotation, translation).
    pub weakest: Vector6<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct JointSolution {
    pub poses: Vec<Pose>,
    pub extrinsic: Pose,
    pub points: Vec<TrackedPoint>,
    pub initial: JointCosts,
    pub costs: JointCosts,
    pub iterations: usize,
    pub dropped_observations: usize,
    pub diverged: bool,
    pub observability: Option<ExtrinsicObservability>,
}

/// Levenberg-Marquardt over poses, extrinsic and points with the points
/// eliminated through their 3x3 blocks. The gauge pose stays fixed.
pub fn solve_joint(problem: &JointProblem, cfg: &JointSolverConfig) -> JointSolution {
    let lay = Layout::new(problem);
    let mut poses = problem.poses.clone();
    let mut extrinsic = problem.extrinsic;
    let mut points: Vec<Vector3<f64>> = problem.points.iter().map(|p| p.world_point).collect();
    let initial = evaluate_costs(problem, State { poses: &poses, extrinsic: &extrinsic, points: &points });
    let mut costs = initial;
    let mut lambda = cfg.initial_lambda;
    let mut iterations = 0;
    let mut diverged = !initial.total.is_finite();
    let n_pts = points.len();

    while !diverged && iterations < cfg.max_iterations && lay.blocks + n_pts > 0 {
        iterations += 1;
        let st = State { poses: &poses, extrinsic: &extrinsic, points: &points };
        let rows = linearize(problem, &lay, st);
        let nm = assemble(&rows, &lay, n_pts);
        let gmax = nm.gc.amax().max(nm.gp.iter().map(|g| g.amax()).fold(0.0, f64::max));
        if !gmax.is_finite() {
            diverged = true;
            break;
        }
        if gmax <= cfg.gradient_tolerance {
            break;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let (s, b, hinv) = reduced_system(&nm, lambda);
            let dc = if s.nrows() == 0 {
                DVector::zeros(0)
            } else {
                match s.cholesky() {
                    Some(ch) => ch.solve(&(-&b)),
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                }
            };
            let mut trial_pts = points.clone();
            for (p, x) in trial_pts.iter_mut().enumerate() {
                let Some(hi) = hinv[p] else { continue };
                let mut rhs = nm.gp[p];
                for (a, ha) in &nm.hcp[p] {
                    rhs += ha.transpose() * dc.fixed_rows::<6>(6 * a);
                }
                *x -= hi * rhs;
            }
            let mut trial_poses = poses.clone();
            for (i, p) in trial_poses.iter_mut().enumerate() {
                if let Some(b) = lay.pose_block[i] {
                    *p = p.retract(&dc.fixed_rows::<6>(6 * b).into_owned());
                }
            }
            let trial_ext = match lay.extrinsic_block {
                Some(b) => extrinsic.retract(&dc.fixed_rows::<6>(6 * b).into_owned()),
                None => extrinsic,
            };
            let trial = evaluate_costs(problem, State { poses: &trial_poses, extrinsic: &trial_ext, points: &trial_pts });
            if trial.total.is_finite() && trial.total < costs.total {
                let rel = (costs.total - trial.total) / costs.total.max(f64::MIN_POSITIVE);
                poses = trial_poses;
                extrinsic = trial_ext;
                points = trial_pts;
                costs = trial;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if rel < cfg.relative_tolerance {
                    lambda = f64::INFINITY;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || lambda.is_infinite() {
            break;
        }
    }

    if diverged {
        warn!("joint solve diverged; keeping inputs");
        return JointSolution {
            poses: problem.poses.clone(),
            extrinsic: problem.extrinsic,
            points: problem.points.clone(),
            initial,
            costs: initial,
            iterations,
            dropped_observations: camera_residuals(problem).1,
            diverged: true,
            observability: None,
        };
    }

    let observability = lay.extrinsic_block.map(|eb| {
        let st = State { poses: &poses, extrinsic: &extrinsic, points: &points };
        let nm = assemble(&linearize(problem, &lay, st), &lay, n_pts);
        extrinsic_observability(&nm, eb, cfg.degeneracy_ratio)
    });

    let out_points: Vec<TrackedPoint> = problem
        .points
        .iter()
        .zip(&points)
        .map(|(tp, x)| TrackedPoint { world_point: *x, observations: tp.observations.clone() })
        .collect();
    let mut solved = problem.clone();
    solved.poses = poses.clone();
    solved.points = out_points.clone();
    let dropped_observations = camera_residuals(&solved).1;
    JointSolution { poses, extrinsic, points: out_points, initial, costs, iterations, dropped_observations, diverged, observability }
}

fn extrinsic_observability(nm: &Normal, eb: usize, ratio: f64) -> ExtrinsicObservability {
    // Eliminate points (tiny damping keeps unconstrained points invertible).
    let (s, _, _) = reduced_system(nm, 1e-12);
    let dim = s.nrows();
    let e0 = 6 * eb;
    let others: Vec<usize> = (0..dim).filter(|k| *k < e0 || *k >= e0 + 6).collect();
    let mut see = Matrix6::<f64>::zeros();
    for a in 0..6 {
        for b in 0..6 {
            see[(a, b)] = s[(e0 + a, e0 + b)];
        }
    }
    let info = if others.is_empty() {
        see
    } else {
        let m = others.len();
        let mut spp = DMatrix::<f64>::zeros(m, m);
        let mut spe = DMatrix::<f64>::zeros(m, 6);
        for (x, &a) in others.iter().enumerate() {
            for (y, &b) in others.iter().enumerate() {
                spp[(x, y)] = s[(a, b)];
            }
            for c in 0..6 {
                spe[(x, c)] = s[(a, e0 + c)];
            }
        }
        let scale = (0..m).map(|k| spp[(k, k)]).fold(0.0, f64::max).max(1e-300);
        for k in 0..m {
            spp[(k, k)] += 1e-12 * scale;
        }
        match spp.cholesky() {
            Some(ch) => {
                let x = ch.solve(&spe);
                let red = spe.transpose() * x;
                let mut out = see;
                for a in 0..6 {
                    for b in 0..6 {
                        out[(a, b)] -= red[(a, b)];
                    }
                }
                out
            }
            None => see,
        }
    };
    let sym = (info + info.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = Vector6::from_iterator(order.iter().map(|&k| eig.eigenvalues[k]));
    let weakest = eig.eigenvectors.column(order[0]).into_owned();
    let degenerate = eigenvalues[0] <= ratio * eigenvalues[5].abs().max(f64::MIN_POSITIVE);
    ExtrinsicObservability { eigenvalues, weakest, degenerate }
}

// ---------------------------------------------------------------- outer loop

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub weights: JointWeights,
    pub huber: Option<HuberConfig>,
    pub solver: JointSolverConfig,
    pub ransac: RansacConfig,
    pub cycle: CycleConfig,
    pub posegraph: LmConfig,
    pub normals: NormalConfig,
    pub lift_radius: f64,
    pub match_window: usize,
    pub loop_stride: usize,
    pub lidar_max_dist: f64,
    pub cross_max_dist: f64,
    pub lidar_points_per_pair: usize,
    pub reprojection_tolerance: f64,
    pub max_outer_iterations: usize,
    pub angle_tolerance: f64,
    pub translation_tolerance: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            weights: JointWeights::default(),
            huber: Some(HuberConfig::default()),
            solver: JointSolverConfig::default(),
            ransac: RansacConfig::default(),
            cycle: CycleConfig::default(),
            posegraph: LmConfig::default(),
            normals: NormalConfig::default(),
            lift_radius: 2.0,
            match_window: 5,
            loop_stride: 10,
            lidar_max_dist: 0.1,
            cross_max_dist: 0.1,
            lidar_points_per_pair: 300,
            reprojection_tolerance: 3.0,
            max_outer_iterations: 10,
            angle_tolerance: 1e-4,
            translation_tolerance: 1e-4,
        }
    }
}

/// The extrinsic after one outer iteration and its change from the previous estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub extrinsic: Pose,
    pub delta_angle: f64,
    pub delta_translation: f64,
}

pub fn format_history(history: &[HistoryEntry]) -> String {
    history
        .iter()
        .map(|h| {
            format!(
                "{} {} {} {}\n",
                h.iteration,
                format_pose_fields(&h.extrinsic),
                fmt_f64(h.delta_angle.to_degrees()),
                fmt_f64(h.delta_translation)
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub poses: Vec<Pose>,
    pub extrinsic: Pose,
    pub points: Vec<TrackedPoint>,
    pub history: Vec<HistoryEntry>,
    pub converged: bool,
    pub edges: Vec<RelativeMotionEdge>,
    pub edge_stats: Vec<EdgeStats>,
    pub last_solution: Option<JointSolution>,
}

impl RefineOutcome {
    pub fn extrinsic_degenerate(&self) -> bool {
        self.last_solution.as_ref().and_then(|s| s.observability.as_ref()).is_some_and(|o| o.degenerate)
    }
}

/// Frame pairs `(newer, older)`: the `window` previous frames plus every
/// `stride`-th older frame.
pub fn match_pairs(n: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 1..n {
        for b in (0..a).rev() {
            let gap = a - b;
            if gap <= window || (stride > 0 && gap % stride == 0) {
                out.push((a, b));
            }
        }
    }
    out
}

/// Runs matching once, then alternates association, relative motion, pose
/// graph and joint refinement until the extrinsic stops moving.
pub fn refine_with_extrinsic_iterations(
    frames: &[Frame],
    k: &CameraIntrinsics,
    matcher: &dyn Matcher,
    initial_extrinsic: Pose,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, RefineError> {
    let n = frames.len();
    if n < 2 {
        return Err(RefineError::NotEnoughFrames(n));
    }
    let pairs = match_pairs(n, cfg.match_window, cfg.loop_stride);
    let matches: Vec<Vec<FeatureMatch>> = pairs
        .par_iter()
        .map(|&(a, b)| match matcher.match_pair(&frames[a], &frames[b]) {
            Ok(ms) => ms
                .into_iter()
                .map(|mut m| {
                    m.frame_a = a;
                    m.frame_b = b;
                    m
                })
                .collect(),
            Err(e) => {
                debug!("pair ({a}, {b}): {e}");
                Vec::new()
            }
        })
        .collect();
    let all_matches: Vec<FeatureMatch> = matches.iter().flatten().cloned().collect();
    info!("matched {} of {} frame pairs, {} correspondences", matches.iter().filter(|m| !m.is_empty()).count(), pairs.len(), all_matches.len());
    let tracks = build_tracks(&all_matches);
    let planes: Vec<PlaneIndex> = frames
        .par_iter()
        .map(|f| {
            let cloud = estimate_normals(&f.cloud, &cfg.normals).unwrap_or_else(|_| PointCloud {
                points: f.cloud.points.clone(),
                normals: Some(vec![None; f.cloud.len()]),
            });
            PlaneIndex::new(cloud)
        })
        .collect();

    let mut te = initial_extrinsic;
    let mut history = Vec::new();
    let mut converged = false;
    let mut last: Option<(Vec<Pose>, Vec<TrackedPoint>, Vec<RelativeMotionEdge>, Vec<EdgeStats>, JointSolution)> = None;
    for iter in 1..=cfg.max_outer_iterations {
        let lifts: Vec<LiftIndex> = frames.par_iter().map(|f| LiftIndex::new(&f.cloud, &te, k, cfg.lift_radius)).collect();
        let edges: Vec<RelativeMotionEdge> = pairs
            .par_iter()
            .zip(matches.par_iter())
            .filter_map(|(&(a, b), ms)| {
                let corr: Vec<(Vector3<f64>, Vector3<f64>)> = ms
                    .iter()
                    .filter_map(|m| {
                        let pa = lifts[a].lift(&m.pixel_a, cfg.lift_radius)?;
                        let pb = lifts[b].lift(&m.pixel_b, cfg.lift_radius)?;
                        Some((te.transform_point(&pb), te.transform_point(&pa)))
                    })
                    .collect();
                let ransac = RansacConfig { seed: cfg.ransac.seed ^ ((a as u64) << 32 | b as u64), ..cfg.ransac };
                estimate_edge(a, b, &corr, &ransac).map_err(|e| debug!("edge ({a}, {b}): {e}")).ok()
            })
            .collect();
        if edges.is_empty() {
            return Err(RefineError::NoEdges);
        }
        let (valid, stats) = filter_edges(&edges, &triangles(&edges), &cfg.cycle);
        let init = initialize_poses(n, &valid, 0)?;
        let pg = optimize_pose_graph(&PoseGraph { poses: init, edges: valid.clone(), gauge: 0 }, &cfg.posegraph);
        let poses = pg.poses;

        let points = triangulate_tracks(&tracks, &poses, k, cfg.reprojection_tolerance);
        let te_inv = te.inverse();
        let lidar_pairs: Vec<PointPlanePair> = valid
            .par_iter()
            .flat_map_iter(|e| {
                let (i, j) = (e.i, e.j);
                let src: Vec<Vector3<f64>> = spread_indices(frames[i].cloud.len(), cfg.lidar_points_per_pair)
                    .into_iter()
                    .map(|s| frames[i].cloud.points[s])
                    .collect();
                let to_j = te_inv.compose(&poses[j]).compose(&poses[i].inverse()).compose(&te);
                pair_point_to_plane(&src, &to_j, &planes[j], cfg.lidar_max_dist, i, j)
            })
            .collect();
        let cross_pairs: Vec<CrossPair> = points
            .par_iter()
            .enumerate()
            .flat_map_iter(|(p, tp)| {
                let poses = &poses;
                let planes = &planes;
                tp.observations.iter().filter_map(move |(f, _)| {
                    let y = te_inv.transform_point(&poses[*f].transform_point(&tp.world_point));
                    let (q, nrm) = planes[*f].nearest_plane(&y, cfg.cross_max_dist)?;
                    Some(CrossPair { point: p, frame: *f, plane_point: q, plane_normal: nrm })
                })
            })
            .collect();
        let problem = JointProblem {
            intrinsics: *k,
            poses: poses.clone(),
            extrinsic: te,
            points,
            lidar_pairs,
            cross_pairs,
            weights: cfg.weights,
            huber: cfg.huber,
            gauge: 0,
            optimize_extrinsic: true,
        };
        let sol = solve_joint(&problem, &cfg.solver);
        let (da, dt) = te.difference(&sol.extrinsic);
        info!(
            "outer iteration {iter}: {} edges ({} valid), {} tracks, {} lidar pairs, {} cross pairs, cost {:.6e} -> {:.6e}, dT_e {:.3e} rad {:.3e} m",
            edges.len(),
            valid.len(),
            problem.points.len(),
            problem.lidar_pairs.len(),
            problem.cross_pairs.len(),
            sol.initial.total,
            sol.costs.total,
            da,
            dt
        );
        te = sol.extrinsic;
        history.push(HistoryEntry { iteration: iter, extrinsic: te, delta_angle: da, delta_translation: dt });
        last = Some((sol.poses.clone(), sol.points.clone(), valid, stats, sol));
        if da < cfg.angle_tolerance && dt < cfg.translation_tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("extrinsic did not converge within {} outer iterations", cfg.max_outer_iterations);
    }
    let (poses, points, edges, edge_stats, sol) = last.expect("at least one outer iteration");
    Ok(RefineOutcome { poses, extrinsic: te, points, history, converged, edges, edge_stats, last_solution: Some(sol) })
}

/// Builds cross pairs for given poses and extrinsic (used by tests and tools).
pub fn build_cross_pairs(
    points: &[TrackedPoint],
    poses: &[Pose],
    extrinsic: &Pose,
    planes: &[PlaneIndex],
    max_dist: f64,
) -> Vec<CrossPair> {
    let te_inv = extrinsic.inverse();
    let mut out = Vec::new();
    for (p, tp) in points.iter().enumerate() {
        for (f, _) in &tp.observations {
            let y = te_inv.transform_point(&poses[*f].transform_point(&tp.world_point));
            if let Some((q, n)) = planes[*f].nearest_plane(&y, max_dist) {
                out.push(CrossPair { point: p, frame: *f, plane_point: q, plane_normal: n });
            }
        }
    }
    out
}
