//! Correspondences between frames: image feature matching, lifting features
//! onto LiDAR points, multi-view triangulation, local-plane normals and
//! point-to-plane pairing.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{project_point, CameraIntrinsics, Pose};
use crate::imaging::ColorImage;
use crate::ingest::{Frame, PointCloud};
use crate::kdtree::KdTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("only {found} matches between frames {a} and {b} (need {needed})")]
    TooFewMatches { a: usize, b: usize, found: usize, needed: usize },
    #[error("observations have no usable baseline")]
    DegenerateBaseline,
    #[error("triangulated point lies behind an observing camera")]
    NegativeDepth,
    #[error("need at least {needed} points, got {got}")]
    NotEnoughPoints { needed: usize, got: usize },
}

/// Minimum number of matches for a frame pair to produce an edge.
pub const MIN_MATCHES: usize = 8;

/// A pixel correspondence between two frames. `key_*` identify the feature
/// within its frame so that matches can be chained into tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatch {
    pub frame_a: usize,
    pub frame_b: usize,
    pub key_a: usize,
    pub key_b: usize,
    pub pixel_a: Vector2<f64>,
    pub pixel_b: Vector2<f64>,
    /// Lifted 3D points in the LiDAR frame of the respective frame.
    pub lifted_a: Option<Vector3<f64>>,
    pub lifted_b: Option<Vector3<f64>>,
}

/// A triangulated feature and its pixel observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedPoint {
    pub world_point: Vector3<f64>,
    pub observations: Vec<(usize, Vector2<f64>)>,
}

/// A point in the source frame matched to a local plane `(q, n)` of the target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPlanePair {
    pub source_point: Vector3<f64>,
    pub plane_point: Vector3<f64>,
    pub plane_normal: Vector3<f64>,
    pub source_frame: usize,
    pub target_frame: usize,
}

impl PointPlanePair {
    pub fn residual(&self, source_in_target: &Vector3<f64>) -> f64 {
        self.plane_normal.dot(&(source_in_target - self.plane_point))
    }
}

/// Produces pixel correspondences for a frame pair.
pub trait Matcher: Sync {
    fn match_pair(&self, a: &Frame, b: &Frame) -> Result<Vec<FeatureMatch>, AssociationError>;
}

// ---------------------------------------------------------------- corner + NCC matcher

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NccMatcherConfig {
    pub cell_size: usize,
    pub max_per_cell: usize,
    pub patch_radius: usize,
    pub min_ncc: f64,
    pub ratio: f64,
    pub search_radius: f64,
}

impl Default for NccMatcherConfig {
    fn default() -> Self {
        Self { cell_size: 16, max_per_cell: 4, patch_radius: 4, min_ncc: 0.8, ratio: 0.8, search_radius: 60.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Keypoint {
    pub u: usize,
    pub v: usize,
    pub score: f64,
    descriptor: Vec<f64>,
}

impl Keypoint {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u as f64, self.v as f64)
    }
}

/// Grid-bucketed corners (minimum eigenvalue of the structure tensor) with
/// zero-mean, unit-norm patch descriptors.
#[derive(Debug, Clone, Default)]
pub struct NccMatcher {
    pub config: NccMatcherConfig,
}

impl NccMatcher {
    pub fn new(config: NccMatcherConfig) -> Self {
        Self { config }
    }

    pub fn detect(&self, img: &ColorImage) -> Vec<Keypoint> {
        let (w, h) = (img.width, img.height);
        let g = img.luminance();
        let at = |u: usize, v: usize| g[v * w + u];
        let mut ix2 = vec![0.0; w * h];
        let mut iy2 = vec![0.0; w * h];
        let mut ixy = vec![0.0; w * h];
        for v in 1..h.saturating_sub(1) {
            for u in 1..w.saturating_sub(1) {
                let gx = 0.5 * (at(u + 1, v) - at(u - 1, v));
                let gy = 0.5 * (at(u, v + 1) - at(u, v - 1));
                ix2[v * w + u] = gx * gx;
                iy2[v * w + u] = gy * gy;
                ixy[v * w + u] = gx * gy;
            }
        }
        let r = self.config.patch_radius;
        let margin = r + 2;
        let mut score = vec![0.0; w * h];
        if w <= 2 * margin || h <= 2 * margin {
            return Vec::new();
        }
        for v in margin..h - margin {
            for u in margin..w - margin {
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for dv in 0..5 {
                    for du in 0..5 {
                        let i = (v + dv - 2) * w + (u + du - 2);
                        a += ix2[i];
                        b += ixy[i];
                        c += iy2[i];
                    }
                }
                let tr = 0.5 * (a + c);
                let det = a * c - b * b;
                score[v * w + u] = tr - (tr * tr - det).max(0.0).sqrt();
            }
        }
        let max_score = score.iter().cloned().fold(0.0, f64::max);
        let floor = (0.01 * max_score).max(1e-8);
        let mut cells: BTreeMap<(usize, usize), Vec<(f64, usize, usize)>> = BTreeMap::new();
        for v in margin..h - margin {
            for u in margin..w - margin {
                let s = score[v * w + u];
                if s < floor {
                    continue;
                }
                let mut is_max = true;
                'nms: for dv in -1i64..=1 {
                    for du in -1i64..=1 {
                        if du == 0 && dv == 0 {
                            continue;
                        }
                        let o = score[(v as i64 + dv) as usize * w + (u as i64 + du) as usize];
                        if o > s || (o == s && (dv, du) < (0, 0)) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if is_max {
                    cells.entry((u / self.config.cell_size, v / self.config.cell_size)).or_default().push((s, u, v));
                }
            }
        }
        let mut out = Vec::new();
        for (_, mut list) in cells {
            list.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            for &(s, u, v) in list.iter().take(self.config.max_per_cell) {
                if let Some(descriptor) = patch_descriptor(&g, w, u, v, r) {
                    out.push(Keypoint { u, v, score: s, descriptor });
                }
            }
        }
        out
    }

    /// Mutual-best NCC matching with a ratio test on `1 - ncc`.
    pub fn match_keypoints(&self, ka: &[Keypoint], kb: &[Keypoint]) -> Vec<(usize, usize)> {
        let cfg = &self.config;
        let best_for = |from: &[Keypoint], to: &[Keypoint]| -> Vec<Option<(usize, f64, f64)>> {
            from.par_iter()
                .map(|a| {
                    let mut best: Option<(usize, f64)> = None;
                    let mut second = f64::NEG_INFINITY;
                    for (j, b) in to.iter().enumerate() {
                        if (a.pixel() - b.pixel()).norm() > cfg.search_radius {
                            continue;
                        }
                        let ncc: f64 = a.descriptor.iter().zip(&b.descriptor).map(|(x, y)| x * y).sum();
                        match best {
                            Some((_, s)) if ncc <= s => second = second.max(ncc),
                            _ => {
                                if let Some((_, s)) = best {
                                    second = second.max(s);
                                }
                                best = Some((j, ncc));
                            }
                        }
                    }
                    best.map(|(j, s)| (j, s, second))
                })
                .collect()
        };
        let ab = best_for(ka, kb);
        let ba = best_for(kb, ka);
        let mut out = Vec::new();
        for (i, m) in ab.iter().enumerate() {
            let Some((j, s, second)) = *m else { continue };
            if s < cfg.min_ncc {
                continue;
            }
            if second.is_finite() && (1.0 - s) >= cfg.ratio * (1.0 - second) {
                continue;
            }
            if ba[j].map(|x| x.0) == Some(i) {
                out.push((i, j));
            }
        }
        out
    }
}

fn patch_descriptor(g: &[f64], w: usize, u: usize, v: usize, r: usize) -> Option<Vec<f64>> {
    let mut d = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    for dv in 0..=2 * r {
        for du in 0..=2 * r {
            d.push(g[(v + dv - r) * w + (u + du - r)]);
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|x| *x -= mean);
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    d.iter_mut().for_each(|x| *x /= norm);
    Some(d)
}

impl Matcher for NccMatcher {
    fn match_pair(&self, a: &Frame, b: &Frame) -> Result<Vec<FeatureMatch>, AssociationError> {
        let ka = self.detect(&a.image);
        let kb = self.detect(&b.image);
        let pairs = self.match_keypoints(&ka, &kb);
        if pairs.len() < MIN_MATCHES {
            return Err(AssociationError::TooFewMatches { a: a.index, b: b.index, found: pairs.len(), needed: MIN_MATCHES });
        }
        Ok(pairs
            .into_iter()
            .map(|(i, j)| FeatureMatch {
                frame_a: a.index,
                frame_b: b.index,
                key_a: ka[i].v * a.image.width + ka[i].u,
                key_b: kb[j].v * b.image.width + kb[j].u,
                pixel_a: ka[i].pixel(),
                pixel_b: kb[j].pixel(),
                lifted_a: None,
                lifted_b: None,
            })
            .collect())
    }
}

// ---------------------------------------------------------------- lifting

/// Cloud points projected into the image, bucketed on a uniform pixel grid.
#[derive(Debug, Clone)]
pub struct LiftIndex {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
    projected: Vec<(Vector2<f64>, f64)>,
    lidar_points: Vec<Vector3<f64>>,
}

impl LiftIndex {
    /// Projects `cloud` (LiDAR frame) through `extrinsic` (LiDAR to camera) and `k`.
    pub fn new(cloud: &PointCloud, extrinsic: &Pose, k: &CameraIntrinsics, lift_radius: f64) -> Self {
        let cell = lift_radius.max(1.0);
        let cols = (k.width as f64 / cell).ceil() as usize + 1;
        let rows = (k.height as f64 / cell).ceil() as usize + 1;
        let mut buckets = vec![Vec::new(); cols * rows];
        let mut projected = Vec::new();
        let mut lidar_points = Vec::new();
        for p in &cloud.points {
            let c = extrinsic.transform_point(p);
            let Ok((px, d)) = project_point(k, &c) else { continue };
            if px.x < -cell || px.y < -cell || px.x > k.width as f64 + cell || px.y > k.height as f64 + cell {
                continue;
            }
            let cx = ((px.x + cell) / cell) as usize;
            let cy = ((px.y + cell) / cell) as usize;
            if cx >= cols || cy >= rows {
                continue;
            }
            buckets[cy * cols + cx].push(projected.len() as u32);
            projected.push((px, d));
            lidar_points.push(*p);
        }
        Self { cell, cols, rows, buckets, projected, lidar_points }
    }

    /// Closest projected point within `radius` pixels (ties go to the nearer depth).
    pub fn lift(&self, pixel: &Vector2<f64>, radius: f64) -> Option<Vector3<f64>> {
        let cx = ((pixel.x + self.cell) / self.cell).floor() as i64;
        let cy = ((pixel.y + self.cell) / self.cell).floor() as i64;
        let reach = (radius / self.cell).ceil() as i64;
        let mut best: Option<(f64, f64, u32)> = None;
        for y in cy - reach..=cy + reach {
            for x in cx - reach..=cx + reach {
                if x < 0 || y < 0 || x as usize >= self.cols || y as usize >= self.rows {
                    continue;
                }
                for &i in &self.buckets[y as usize * self.cols + x as usize] {
                    let (px, d) = self.projected[i as usize];
                    let dist = (px - pixel).norm();
                    if dist > radius {
                        continue;
                    }
                    let cand = (dist, d, i);
                    if best.is_none_or(|b| {
                        cand.0 < b.0 || (cand.0 == b.0 && (cand.1 < b.1 || (cand.1 == b.1 && cand.2 < b.2)))
                    }) {
                        best = Some(cand);
                    }
                }
            }
        }
        best.map(|(_, _, i)| self.lidar_points[i as usize])
    }
}

/// Lifts one feature pixel onto the cloud; see [`LiftIndex`].
pub fn lift_to_3d(
    pixel: &Vector2<f64>,
    cloud: &PointCloud,
    k: &CameraIntrinsics,
    extrinsic: &Pose,
    lift_radius: f64,
) -> Option<Vector3<f64>> {
    LiftIndex::new(cloud, extrinsic, k, lift_radius).lift(pixel, lift_radius)
}

// ---------------------------------------------------------------- triangulation

/// Linear triangulation followed by one Gauss-Newton step on reprojection error.
/// Observations pair a world-to-camera pose with a pixel.
pub fn triangulate(observations: &[(Pose, Vector2<f64>)], k: &CameraIntrinsics) -> Result<Vector3<f64>, AssociationError> {
    if observations.len() < 2 {
        return Err(AssociationError::NotEnoughPoints { needed: 2, got: observations.len() });
    }
    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (n, (pose, px)) in observations.iter().enumerate() {
        let x = (px.x - k.cx) / k.fx;
        let y = (px.y - k.cy) / k.fy;
        let r = &pose.rotation;
        let t = &pose.translation;
        for c in 0..4 {
            let p = |row: usize| if c < 3 { r[(row, c)] } else { t[row] };
            a[(2 * n, c)] = x * p(2) - p(0);
            a[(2 * n + 1, c)] = y * p(2) - p(1);
        }
    }
    // Row-scale for conditioning.
    for mut row in a.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(AssociationError::DegenerateBaseline)?;
    let imin = svd.singular_values.imin();
    let h = v_t.row(imin);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(AssociationError::DegenerateBaseline);
    }
    let mut x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    let max_parallax = {
        let centers: Vec<Vector3<f64>> = observations.iter().map(|(p, _)| p.center()).collect();
        let mut best = 0.0f64;
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                let (ra, rb) = (x - centers[i], x - centers[j]);
                let (na, nb) = (ra.norm(), rb.norm());
                if na > 0.0 && nb > 0.0 {
                    best = best.max((ra.dot(&rb) / (na * nb)).clamp(-1.0, 1.0).acos());
                }
            }
        }
        best
    };
    if max_parallax < 1f64.to_radians() {
        return Err(AssociationError::DegenerateBaseline);
    }

    let cost = |x: &Vector3<f64>| -> f64 {
        observations
            .iter()
            .map(|(p, u)| match project_point(k, &p.transform_point(x)) {
                Ok((px, _)) => (px - u).norm_squared(),
                Err(_) => f64::INFINITY,
            })
            .sum()
    };
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    let mut ok = true;
    for (p, u) in observations {
        let y = p.transform_point(&x);
        if y.z <= 1e-9 {
            ok = false;
            break;
        }
        let (px, _) = project_point(k, &y).unwrap();
        let j = k.projection_jacobian(&y) * p.rotation;
        jtj += j.transpose() * j;
        jtr += j.transpose() * (px - u);
    }
    if ok {
        if let Some(inv) = jtj.try_inverse() {
            let candidate = x - inv * jtr;
            if cost(&candidate) < cost(&x) {
                x = candidate;
            }
        }
    }
    if observations.iter().any(|(p, _)| p.transform_point(&x).z <= 0.0) {
        return Err(AssociationError::NegativeDepth);
    }
    Ok(x)
}

/// Pixel observations of one feature across frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub observations: Vec<(usize, Vector2<f64>)>,
}

/// Chains pairwise matches into tracks with union-find over `(frame, key)`.
/// When a track holds several features in one frame, the best-connected one is kept.
pub fn build_tracks(matches: &[FeatureMatch]) -> Vec<Track> {
    let mut ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pixel: Vec<Vector2<f64>> = Vec::new();
    let mut nodes: Vec<(usize, usize)> = Vec::new();
    let mut degree: Vec<usize> = Vec::new();
    let mut id_of = |f: usize, key: usize, px: Vector2<f64>, pixel: &mut Vec<Vector2<f64>>, nodes: &mut Vec<(usize, usize)>, degree: &mut Vec<usize>| {
        let id = *ids.entry((f, key)).or_insert_with(|| {
            pixel.push(px);
            nodes.push((f, key));
            degree.push(0);
            pixel.len() - 1
        });
        degree[id] += 1;
        id
    };
    let mut edges = Vec::with_capacity(matches.len());
    for m in matches {
        let a = id_of(m.frame_a, m.key_a, m.pixel_a, &mut pixel, &mut nodes, &mut degree);
        let b = id_of(m.frame_b, m.key_b, m.pixel_b, &mut pixel, &mut nodes, &mut degree);
        edges.push((a, b));
    }
    let mut parent: Vec<usize> = (0..pixel.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for id in 0..pixel.len() {
        let r = find(&mut parent, id);
        groups.entry(r).or_default().push(id);
    }
    let mut tracks = Vec::new();
    for (_, members) in groups {
        let mut per_frame: BTreeMap<usize, usize> = BTreeMap::new();
        for id in members {
            let f = nodes[id].0;
            match per_frame.get(&f) {
                Some(&other) if (degree[other], std::cmp::Reverse(nodes[other].1)) >= (degree[id], std::cmp::Reverse(nodes[id].1)) => {}
                _ => {
                    per_frame.insert(f, id);
                }
            }
        }
        if per_frame.len() >= 2 {
            tracks.push(Track { observations: per_frame.into_iter().map(|(f, id)| (f, pixel[id])).collect() });
        }
    }
    tracks
}

/// Triangulates tracks, dropping observations whose reprojection error exceeds
/// `reproj_tol` pixels and re-solving on the survivors.
pub fn triangulate_tracks(
    tracks: &[Track],
    poses: &[Pose],
    k: &CameraIntrinsics,
    reproj_tol: f64,
) -> Vec<TrackedPoint> {
    tracks
        .par_iter()
        .filter_map(|t| {
            let mut obs: Vec<(usize, Vector2<f64>)> = t.observations.clone();
            for _ in 0..3 {
                if obs.len() < 2 {
                    return None;
                }
                let input: Vec<(Pose, Vector2<f64>)> = obs.iter().map(|(f, px)| (poses[*f], *px)).collect();
                let x = triangulate(&input, k).ok()?;
                let errors: Vec<f64> = obs
                    .iter()
                    .map(|(f, px)| match project_point(k, &poses[*f].transform_point(&x)) {
                        Ok((p, _)) => (p - px).norm(),
                        Err(_) => f64::INFINITY,
                    })
                    .collect();
                if errors.iter().all(|&e| e < reproj_tol) {
                    return Some(TrackedPoint { world_point: x, observations: obs });
                }
                // Drop the worst observation and retry.
                let worst = errors.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|x| x.0).unwrap();
                obs.remove(worst);
            }
            None
        })
        .collect()
}

// ---------------------------------------------------------------- normals and planes

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalConfig {
    pub k_neighbors: usize,
    pub planarity_tol: f64,
}

impl Default for NormalConfig {
    fn default() -> Self {
        Self { k_neighbors: 10, planarity_tol: 0.2 }
    }
}

/// PCA normals over the `k_neighbors` nearest points, oriented toward the sensor
/// origin. Points whose neighborhood is not planar get no normal.
pub fn estimate_normals(cloud: &PointCloud, cfg: &NormalConfig) -> Result<PointCloud, AssociationError> {
    if cloud.len() < cfg.k_neighbors || cfg.k_neighbors < 3 {
        return Err(AssociationError::NotEnoughPoints { needed: cfg.k_neighbors.max(3), got: cloud.len() });
    }
    let tree = KdTree::new(&cloud.points);
    let normals = cloud
        .points
        .par_iter()
        .map(|p| {
            let nb = tree.knn(p, cfg.k_neighbors);
            local_plane_normal(nb.iter().map(|(i, _)| &cloud.points[*i]), cfg.planarity_tol).map(|n| {
                if n.dot(&(-p)) < 0.0 {
                    -n
                } else {
                    n
                }
            })
        })
        .collect();
    Ok(PointCloud { points: cloud.points.clone(), normals: Some(normals) })
}

fn local_plane_normal<'a>(pts: impl Iterator<Item = &'a Vector3<f64>> + Clone, planarity_tol: f64) -> Option<Vector3<f64>> {
    let n = pts.clone().count() as f64;
    let mean = pts.clone().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1, l2) = (eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if l2 <= 0.0 || l1 <= 1e-10 * l2 || l0 > planarity_tol * l1 {
        return None;
    }
    Some(eig.eigenvectors.column(order[0]).normalize())
}

/// A target cloud with normals and its spatial index.
#[derive(Debug, Clone)]
pub struct PlaneIndex {
    pub cloud: PointCloud,
    tree: KdTree,
}

impl PlaneIndex {
    pub fn new(cloud: PointCloud) -> Self {
        let tree = KdTree::new(&cloud.points);
        Self { cloud, tree }
    }

    /// Nearest target point within `max_dist` that carries a normal.
    pub fn nearest_plane(&self, x: &Vector3<f64>, max_dist: f64) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let (i, _) = self.tree.nearest_within(x, max_dist)?;
        let n = self.cloud.normal(i)?;
        Some((self.cloud.points[i], n))
    }
}

/// Pairs each source point (already expressed in the target frame through
/// `source_to_target`) with the nearest local plane of the target.
pub fn pair_point_to_plane(
    source: &[Vector3<f64>],
    source_to_target: &Pose,
    target: &PlaneIndex,
    max_dist: f64,
    source_frame: usize,
    target_frame: usize,
) -> Vec<PointPlanePair> {
    source
        .iter()
        .filter_map(|p| {
            let x = source_to_target.transform_point(p);
            let (q, n) = target.nearest_plane(&x, max_dist)?;
            Some(PointPlanePair { source_point: *p, plane_point: q, plane_normal: n, source_frame, target_frame })
        })
        .collect()
}

/// Deterministic sub-sample of at most `max` indices spread evenly over `0..len`.
pub fn spread_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * len / max).collect()
}

/// Groups feature matches by frame pair, keeping pair order stable.
pub fn group_by_pair(matches: &[FeatureMatch]) -> HashMap<(usize, usize), Vec<&FeatureMatch>> {
    let mut out: HashMap<(usize, usize), Vec<&FeatureMatch>> = HashMap::new();
    for m in matches {
        out.entry((m.frame_a, m.frame_b)).or_default().push(m);
    }
    out
}
