//! Cycle-consistency filtering of relative-motion edges, spanning-tree pose
//! initialization and pose-graph optimization.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::fsutil::fmt_f64;
use crate::geom::{log_se3, Pose};
use crate::ingest::format_pose_fields;
use crate::relmotion::RelativeMotionEdge;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseGraphError {
    #[error("pose graph is disconnected: components {0:?}")]
    DisconnectedGraph(Vec<Vec<usize>>),
    #[error("edge references node {node} but the graph has {nodes} nodes")]
    InvalidNode { node: usize, nodes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleConfig {
    pub angle_tol: f64,
    pub trans_tol: f64,
    pub rate_threshold: f64,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self { angle_tol: 2f64.to_radians(), trans_tol: 0.1, rate_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeStats {
    pub edge: usize,
    pub passed: usize,
    pub involved: usize,
    pub success_rate: f64,
}

/// Rotation angle and translation norm of `T_ij · T_jk · T_ki`, which is the
/// identity for a consistent cycle when `T_ab` maps frame b into frame a.
pub fn cycle_error(t_ij: &Pose, t_jk: &Pose, t_ki: &Pose) -> (f64, f64) {
    let c = t_ij.compose(t_jk).compose(t_ki);
    (c.rotation_angle(), c.translation.norm())
}

/// `T_ab` taken from an edge stored in either direction.
fn directed(edge: &RelativeMotionEdge, a: usize) -> Pose {
    if edge.i == a {
        edge.transform
    } else {
        edge.transform.inverse()
    }
}

/// All 3-cycles of the edge graph, as edge indices `[e_ab, e_bc, e_ca]` with `a < b < c`.
pub fn triangles(edges: &[RelativeMotionEdge]) -> Vec<[usize; 3]> {
    let mut by_pair: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, e) in edges.iter().enumerate() {
        if e.i == e.j {
            continue;
        }
        let key = (e.i.min(e.j), e.i.max(e.j));
        if by_pair.contains_key(&key) {
            continue;
        }
        by_pair.insert(key, k);
        adj.entry(key.0).or_default().push(key.1);
    }
    let mut out = Vec::new();
    for (&a, nb) in &adj {
        let mut nb = nb.clone();
        nb.sort_unstable();
        for (x, &b) in nb.iter().enumerate() {
            for &c in &nb[x + 1..] {
                if let Some(&bc) = by_pair.get(&(b, c)) {
                    out.push([by_pair[&(a, b)], bc, by_pair[&(a, c)]]);
                }
            }
        }
    }
    out
}

/// Cycle error of one triangle from [`triangles`].
pub fn triangle_error(edges: &[RelativeMotionEdge], tri: &[usize; 3]) -> (f64, f64) {
    let (ab, bc, ca) = (&edges[tri[0]], &edges[tri[1]], &edges[tri[2]]);
    let a = ab.i.min(ab.j);
    let b = ab.i.max(ab.j);
    let c = if bc.i == b { bc.j } else { bc.i };
    cycle_error(&directed(ab, a), &directed(bc, b), &directed(ca, c))
}

/// Scores each edge by the fraction of its triangles that close within
/// tolerance and drops edges below `rate_threshold`. Edges in no triangle are kept.
pub fn filter_edges(
    edges: &[RelativeMotionEdge],
    cycles: &[[usize; 3]],
    cfg: &CycleConfig,
) -> (Vec<RelativeMotionEdge>, Vec<EdgeStats>) {
    let passed: Vec<bool> = cycles
        .par_iter()
        .map(|t| {
            let (angle, trans) = triangle_error(edges, t);
            angle <= cfg.angle_tol && trans <= cfg.trans_tol
        })
        .collect();
    let mut stats: Vec<EdgeStats> =
        (0..edges.len()).map(|edge| EdgeStats { edge, passed: 0, involved: 0, success_rate: 1.0 }).collect();
    for (t, ok) in cycles.iter().zip(&passed) {
        for &e in t {
            stats[e].involved += 1;
            if *ok {
                stats[e].passed += 1;
            }
        }
    }
    for s in &mut stats {
        if s.involved > 0 {
            s.success_rate = s.passed as f64 / s.involved as f64;
        }
    }
    let valid = edges
        .iter()
        .zip(&stats)
        .filter(|(_, s)| s.involved == 0 || s.success_rate >= cfg.rate_threshold)
        .map(|(e, _)| e.clone())
        .collect();
    (valid, stats)
}

/// Connected components over `n` nodes, each sorted, ordered by smallest member.
pub fn components(n: usize, edges: &[RelativeMotionEdge]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        if e.i < n && e.j < n {
            adj[e.i].push(e.j);
            adj[e.j].push(e.i);
        }
    }
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![s];
        seen[s] = true;
        let mut q = VecDeque::from([s]);
        while let Some(x) = q.pop_front() {
            for &y in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    comp.push(y);
                    q.push_back(y);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Breadth-first chaining of edge transforms from `root` (identity).
pub fn initialize_poses(n: usize, edges: &[RelativeMotionEdge], root: usize) -> Result<Vec<Pose>, PoseGraphError> {
    for e in edges {
        for node in [e.i, e.j] {
            if node >= n {
                return Err(PoseGraphError::InvalidNode { node, nodes: n });
            }
        }
    }
    let comps = components(n, edges);
    if comps.len() > 1 {
        return Err(PoseGraphError::DisconnectedGraph(comps));
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, e) in edges.iter().enumerate() {
        adj[e.i].push(k);
        adj[e.j].push(k);
    }
    let mut poses: Vec<Option<Pose>> = vec![None; n];
    poses[root] = Some(Pose::identity());
    let mut q = VecDeque::from([root]);
    while let Some(a) = q.pop_front() {
        let ta = poses[a].unwrap();
        for &k in &adj[a] {
            let e = &edges[k];
            let b = if e.i == a { e.j } else { e.i };
            if poses[b].is_some() {
                continue;
            }
            // T_b = T_ab^-1 · T_a
            poses[b] = Some(directed(e, a).inverse().compose(&ta));
            q.push_back(b);
        }
    }
    Ok(poses.into_iter().map(|p| p.unwrap()).collect())
}

#[derive(Debug, Clone)]
pub struct PoseGraph {
    pub poses: Vec<Pose>,
    pub edges: Vec<RelativeMotionEdge>,
    pub gauge: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { max_iterations: 100, relative_tolerance: 1e-10, initial_lambda: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct PoseGraphSolution {
    pub poses: Vec<Pose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Set when no damped step could be evaluated; poses are then the input.
    pub diverged: bool,
}

/// `log(T_ij · T_j · T_i^-1)`, zero when the edge agrees with the poses.
pub fn edge_residual(edge: &RelativeMotionEdge, poses: &[Pose]) -> Option<Vector6<f64>> {
    let e = edge.transform.compose(&poses[edge.j]).compose(&poses[edge.i].inverse());
    log_se3(&e).ok().map(|t| t.to_vector())
}

pub fn graph_cost(edges: &[RelativeMotionEdge], poses: &[Pose]) -> f64 {
    edges
        .iter()
        .map(|e| edge_residual(e, poses).map_or(f64::INFINITY, |r| r.norm_squared()))
        .sum()
}

const FD_STEP: f64 = 1e-6;

fn numeric_block(edge: &RelativeMotionEdge, poses: &[Pose], node: usize) -> Option<Matrix6<f64>> {
    let mut j = Matrix6::zeros();
    let mut local = [poses[edge.i], poses[edge.j]];
    let slot = if node == edge.i { 0 } else { 1 };
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = FD_STEP;
        let base = local[slot];
        local[slot] = base.retract(&d);
        let plus = residual_of(edge, &local)?;
        local[slot] = base.retract(&-d);
        let minus = residual_of(edge, &local)?;
        local[slot] = base;
        j.set_column(k, &((plus - minus) / (2.0 * FD_STEP)));
    }
    Some(j)
}

fn residual_of(edge: &RelativeMotionEdge, local: &[Pose; 2]) -> Option<Vector6<f64>> {
    let e = edge.transform.compose(&local[1]).compose(&local[0].inverse());
    log_se3(&e).ok().map(|t| t.to_vector())
}

/// Levenberg-Marquardt over left se(3) increments of every non-gauge pose.
pub fn optimize_pose_graph(graph: &PoseGraph, cfg: &LmConfig) -> PoseGraphSolution {
    let n = graph.poses.len();
    let var_of = |node: usize| -> Option<usize> {
        match node.cmp(&graph.gauge) {
            std::cmp::Ordering::Less => Some(node),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(node - 1),
        }
    };
    let dim = 6 * n.saturating_sub(1);
    let mut poses = graph.poses.clone();
    let initial_cost = graph_cost(&graph.edges, &poses);
    let mut cost = initial_cost;
    let mut lambda = cfg.initial_lambda;
    let mut iterations = 0;
    if !cost.is_finite() {
        return PoseGraphSolution { poses, initial_cost, final_cost: cost, iterations, diverged: true };
    }
    while iterations < cfg.max_iterations && cost > 0.0 && dim > 0 {
        iterations += 1;
        let blocks: Vec<Option<(Vector6<f64>, Matrix6<f64>, Matrix6<f64>)>> = graph
            .edges
            .par_iter()
            .map(|e| {
                let r = edge_residual(e, &poses)?;
                Some((r, numeric_block(e, &poses, e.i)?, numeric_block(e, &poses, e.j)?))
            })
            .collect();
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for (e, b) in graph.edges.iter().zip(&blocks) {
            let Some((r, ji, jj)) = b else {
                return PoseGraphSolution { poses: graph.poses.clone(), initial_cost, final_cost: initial_cost, iterations, diverged: true };
            };
            let parts = [(var_of(e.i), ji), (var_of(e.j), jj)];
            for (va, ja) in &parts {
                let Some(va) = va else { continue };
                let mut gs = g.fixed_rows_mut::<6>(6 * va);
                gs += ja.transpose() * r;
                for (vb, jb) in &parts {
                    let Some(vb) = vb else { continue };
                    let mut blk = h.fixed_view_mut::<6, 6>(6 * va, 6 * vb);
                    blk += ja.transpose() * *jb;
                }
            }
        }
        if g.amax() < 1e-15 {
            break;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = h.clone();
            for k in 0..dim {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let mut trial = poses.clone();
            for (node, p) in trial.iter_mut().enumerate() {
                if let Some(v) = var_of(node) {
                    *p = p.retract(&step.fixed_rows::<6>(6 * v).into_owned());
                }
            }
            let trial_cost = graph_cost(&graph.edges, &trial);
            if trial_cost < cost {
                let rel = (cost - trial_cost) / cost;
                poses = trial;
                cost = trial_cost;
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                if rel < cfg.relative_tolerance {
                    return PoseGraphSolution { poses, initial_cost, final_cost: cost, iterations, diverged: false };
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    PoseGraphSolution { poses, initial_cost, final_cost: cost, iterations, diverged: false }
}

/// Debug dump: one edge per line `i j tx ty tz qx qy qz qw R_success`.
pub fn graph_dump(edges: &[RelativeMotionEdge], stats: &[EdgeStats]) -> String {
    let mut s = String::new();
    for (e, st) in edges.iter().zip(stats) {
        s.push_str(&format!("{} {} {} {}\n", e.i, e.j, format_pose_fields(&e.transform), fmt_f64(st.success_rate)));
    }
    s
}
