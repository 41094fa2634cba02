//! Synthetic worlds: a textured room with box clutter, a camera arc, a
//! 360-degree range-limited LiDAR and a ground-truth feature matcher.

use crate::association::{AssociationError, FeatureMatch, Matcher, MIN_MATCHES};
use crate::fsutil::write_atomic;
use crate::geom::{CameraIntrinsics, Pose};
use crate::ingest::{nearest_timestamp, write_generic_dataset, Calibration, Frame, IngestError, PointCloud};
use crate::splatmap::{render, Gaussian, RasterConfig};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Name of the file that records how a persisted world was generated.
pub const SPEC_FILE: &str = "synth.toml";
/// Ground-truth extrinsic of a persisted world.
pub const GT_EXTRINSIC_FILE: &str = "gt_extrinsic.txt";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub frames: usize,
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Room extent along x, y and z; the floor is at z = 0.
    pub room: [f64; 3],
    pub clutter_boxes: usize,
    pub arc_radius: f64,
    pub arc_degrees: f64,
    pub camera_height: f64,
    /// LiDAR samples drawn around each Gaussian center (the center included).
    pub lidar_per_gaussian: usize,
    pub lidar_range: f64,
    /// Every n-th Gaussian center away from surface edges is a trackable landmark.
    pub landmark_stride: usize,
    pub min_visible: usize,
    pub frame_rate: f64,
    pub pixel_noise: f64,
    pub point_noise: f64,
    pub outlier_fraction: f64,
    pub cloud_outlier_fraction: f64,
    pub identity_extrinsic: bool,
    /// Rotation (degrees) and translation (m) applied to the true extrinsic
    /// to form the initial calibration.
    pub extrinsic_error_deg: f64,
    pub extrinsic_error_m: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frames: 20,
            gaussians: 2000,
            width: 160,
            height: 120,
            focal: 120.0,
            room: [5.0, 4.0, 2.6],
            clutter_boxes: 4,
            arc_radius: 1.4,
            arc_degrees: 90.0,
            camera_height: 1.3,
            lidar_per_gaussian: 16,
            lidar_range: 10.0,
            landmark_stride: 2,
            min_visible: 150,
            frame_rate: 10.0,
            pixel_noise: 0.0,
            point_noise: 0.0,
            outlier_fraction: 0.0,
            cloud_outlier_fraction: 0.0,
            identity_extrinsic: false,
            extrinsic_error_deg: 2.0,
            extrinsic_error_m: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::SpecInvalid(m.to_string()));
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if self.width < 16 || self.height < 16 {
            return bad("images must be at least 16x16");
        }
        if self.gaussians < 10 {
            return bad("need at least 10 gaussians");
        }
        if self.lidar_per_gaussian == 0 || self.landmark_stride == 0 {
            return bad("lidar_per_gaussian and landmark_stride must be positive");
        }
        let positive = [self.focal, self.room[0], self.room[1], self.room[2], self.lidar_range, self.frame_rate];
        if positive.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return bad("focal, room, lidar_range and frame_rate must be positive");
        }
        let nonneg = [self.pixel_noise, self.point_noise, self.arc_radius, self.arc_degrees, self.extrinsic_error_deg, self.extrinsic_error_m];
        if nonneg.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("noise levels, arc and extrinsic error must be non-negative");
        }
        for f in [self.outlier_fraction, self.cloud_outlier_fraction] {
            if !(0.0..1.0).contains(&f) {
                return bad("outlier fractions must lie in [0, 1)");
            }
        }
        let half = 0.5 * self.room[0].min(self.room[1]);
        if self.arc_radius + 0.3 >= half {
            return bad("camera arc does not fit inside the room");
        }
        if !(0.2..self.room[2] - 0.2).contains(&self.camera_height) {
            return bad("camera height outside the room");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        CameraIntrinsics::new(self.focal, self.focal, cx, cy, self.width, self.height).expect("validated spec")
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::SpecInvalid(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// A landmark seen by one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Index into `SyntheticWorld::points`.
    pub point: usize,
    pub true_pixel: Vector2<f64>,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Aabb {
    /// True when the open segment from `from` to `to` passes through the box
    /// before reaching `to`.
    fn blocks(&self, from: &Vector3<f64>, to: &Vector3<f64>) -> bool {
        let d = to - from;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if from[a] <= self.min[a] || from[a] >= self.max[a] {
                    return false;
                }
                continue;
            }
            let (mut lo, mut hi) = ((self.min[a] - from[a]) / d[a], (self.max[a] - from[a]) / d[a]);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        let eps = 1e-6 / d.norm().max(1e-9);
        t0 < t1 && t0 < 1.0 - eps && t1 > eps
    }
}

#[derive(Debug, Clone)]
struct Face {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    size: (f64, f64),
    color: Vector3<f64>,
    phase: f64,
    /// Room surfaces are hidden where a box stands against them.
    room: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SynthSpec,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub gt_map: Vec<Gaussian>,
    /// World-to-camera poses.
    pub gt_trajectory: Vec<Pose>,
    pub timestamps: Vec<f64>,
    pub gt_extrinsic: Pose,
    /// Perturbed extrinsic handed to the pipeline as calibration.
    pub initial_extrinsic: Pose,
    /// Surface samples the LiDAR can return, in world coordinates.
    pub points: Vec<Vector3<f64>>,
    /// Per frame: indices of `points` in its cloud, in cloud order.
    pub lidar_visible: Vec<Vec<usize>>,
    /// Per frame: landmark observations, sorted by point index.
    pub observations: Vec<Vec<Observation>>,
    obstacles: Vec<Aabb>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn sub_rng(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed ^ stream) ^ a) ^ b))
}

fn look_at(center: Vector3<f64>, forward: Vector3<f64>) -> Pose {
    let z = forward.normalize();
    let x = z.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Pose::new(r, -(r * center))
}

fn rotation_about(axis: Vector3<f64>, angle: f64) -> Pose {
    Pose::from_axis_angle(axis, angle, Vector3::zeros())
}

const PALETTE: [[f64; 3]; 8] = [
    [0.75, 0.45, 0.30],
    [0.35, 0.55, 0.70],
    [0.55, 0.65, 0.35],
    [0.70, 0.60, 0.45],
    [0.50, 0.40, 0.60],
    [0.40, 0.60, 0.55],
    [0.80, 0.70, 0.35],
    [0.30, 0.40, 0.50],
];

fn room_faces(spec: &SynthSpec) -> Vec<Face> {
    let [lx, ly, lz] = spec.room;
    let (hx, hy) = (lx / 2.0, ly / 2.0);
    let v3 = Vector3::new;
    // (origin, u, v, size) with u x v pointing into the room.
    let raw = [
        (v3(-hx, -hy, 0.0), v3(1.0, 0.0, 0.0), v3(0.0, 1.0, 0.0), (lx, ly)),
        (v3(-hx, -hy, lz), v3(0.0, 1.0, 0.0), v3(1.0, 0.0, 0.0), (ly, lx)),
        (v3(hx, -hy, 0.0), v3(0.0, 1.0, 0.0), v3(0.0, 0.0, 1.0), (ly, lz)),
        (v3(-hx, -hy, 0.0), v3(0.0, 0.0, 1.0), v3(0.0, 1.0, 0.0), (lz, ly)),
        (v3(-hx, -hy, 0.0), v3(1.0, 0.0, 0.0), v3(0.0, 0.0, 1.0), (lx, lz)),
        (v3(-hx, hy, 0.0), v3(0.0, 0.0, 1.0), v3(1.0, 0.0, 0.0), (lz, lx)),
    ];
    raw.iter()
        .enumerate()
        .map(|(i, &(origin, u, v, size))| Face { origin, u, v, size, color: Vector3::from(PALETTE[i]), phase: i as f64, room: true })
        .collect()
}

fn place_boxes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Aabb> {
    // Clutter fills room corners, sized to stay outside the region swept by
    // the cameras: from there no segment to a surface point crosses a box.
    let [lx, ly, lz] = spec.room;
    let (hx, hy) = (lx / 2.0, ly / 2.0);
    let free_x = hx - spec.arc_radius - 0.2;
    let free_y = hy - spec.arc_radius - 0.2;
    let corners = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let mut boxes = Vec::new();
    for &(sx, sy) in corners.iter().take(spec.clutter_boxes) {
        if free_x < 0.15 || free_y < 0.15 {
            break;
        }
        let w = rng.random_range(0.6..1.0) * free_x.min(0.8);
        let d = rng.random_range(0.6..1.0) * free_y.min(0.8);
        let h = rng.random_range(0.3..0.9f64.min(0.6 * lz).min(spec.camera_height - 0.3).max(0.31));
        let (x0, x1) = if sx > 0.0 { (hx - w, hx) } else { (-hx, -hx + w) };
        let (y0, y1) = if sy > 0.0 { (hy - d, hy) } else { (-hy, -hy + d) };
        boxes.push(Aabb { min: Vector3::new(x0, y0, 0.0), max: Vector3::new(x1, y1, h) });
    }
    boxes
}

fn box_faces(b: &Aabb, room: &[f64; 3], first_color: usize) -> Vec<Face> {
    let s = b.max - b.min;
    let v3 = Vector3::new;
    let (x0, y0, x1, y1, z1) = (b.min.x, b.min.y, b.max.x, b.max.y, b.max.z);
    // u x v points out of the box.
    let raw = [
        (v3(x0, y0, z1), v3(1.0, 0.0, 0.0), v3(0.0, 1.0, 0.0), (s.x, s.y)),
        (v3(x1, y0, 0.0), v3(0.0, 1.0, 0.0), v3(0.0, 0.0, 1.0), (s.y, s.z)),
        (v3(x0, y0, 0.0), v3(0.0, 0.0, 1.0), v3(0.0, 1.0, 0.0), (s.z, s.y)),
        (v3(x0, y0, 0.0), v3(1.0, 0.0, 0.0), v3(0.0, 0.0, 1.0), (s.x, s.z)),
        (v3(x0, y1, 0.0), v3(0.0, 0.0, 1.0), v3(1.0, 0.0, 0.0), (s.z, s.x)),
    ];
    let half = [room[0] / 2.0, room[1] / 2.0];
    raw.iter()
        .filter(|(o, u, v, _)| {
            let a = u.cross(v).iamax();
            a == 2 || (o[a].abs() - half[a]).abs() > 1e-9
        })
        .enumerate()
        .map(|(i, &(origin, u, v, size))| Face {
            origin,
            u,
            v,
            size,
            color: Vector3::from(PALETTE[(first_color + i) % PALETTE.len()]),
            phase: (first_color + i) as f64,
            room: false,
        })
        .collect()
}

fn texture(face: &Face, a: f64, b: f64) -> Vector3<f64> {
    let w1 = (std::f64::consts::TAU * a / 1.3 + face.phase).sin();
    let w2 = (std::f64::consts::TAU * b / 1.1 + 0.7 * face.phase).cos();
    let w3 = (std::f64::consts::TAU * (a + b) / 0.9).sin();
    face.color + Vector3::new(0.2 * w1 * w2, 0.15 * w3, 0.2 * w1 - 0.1 * w2)
}

struct Surfaces {
    gaussians: Vec<Gaussian>,
    points: Vec<Vector3<f64>>,
    landmarks: Vec<usize>,
}

fn sample_surfaces(spec: &SynthSpec, faces: &[Face], boxes: &[Aabb], rng: &mut ChaCha8Rng) -> Surfaces {
    let area: f64 = faces.iter().map(|f| f.size.0 * f.size.1).sum();
    let spacing = (area / spec.gaussians as f64).sqrt();
    let edge_margin = 1.5 * spacing;
    let covered = |p: &Vector3<f64>| boxes.iter().any(|b| (0..3).all(|a| p[a] >= b.min[a] - 1e-9 && p[a] <= b.max[a] + 1e-9));
    let mut out = Surfaces { gaussians: Vec::new(), points: Vec::new(), landmarks: Vec::new() };
    let mut center_count = 0usize;
    for face in faces {
        let nu = (face.size.0 / spacing).round().max(1.0) as usize;
        let nv = (face.size.1 / spacing).round().max(1.0) as usize;
        let (du, dv) = (face.size.0 / nu as f64, face.size.1 / nv as f64);
        for i in 0..nu {
            for j in 0..nv {
                let a = (i as f64 + 0.5 + rng.random_range(-0.25..0.25)) * du;
                let b = (j as f64 + 0.5 + rng.random_range(-0.25..0.25)) * dv;
                let at = |a: f64, b: f64| face.origin + face.u * a + face.v * b;
                let center = at(a, b);
                if face.room && covered(&center) {
                    continue;
                }
                let jitter = Vector3::new(rng.random_range(-0.015..0.015), rng.random_range(-0.015..0.015), rng.random_range(-0.015..0.015));
                let color = (texture(face, a, b) + jitter).map(|c| c.clamp(0.02, 0.98));
                out.gaussians.push(Gaussian::new(center, color, 0.99, 0.9 * du.max(dv)));
                let interior = a > edge_margin && a < face.size.0 - edge_margin && b > edge_margin && b < face.size.1 - edge_margin;
                if interior && center_count.is_multiple_of(spec.landmark_stride) {
                    out.landmarks.push(out.points.len());
                }
                center_count += 1;
                out.points.push(center);
                for _ in 1..spec.lidar_per_gaussian {
                    let pa = (a + rng.random_range(-0.5..0.5) * du).clamp(0.0, face.size.0);
                    let pb = (b + rng.random_range(-0.5..0.5) * dv).clamp(0.0, face.size.1);
                    let p = at(pa, pb);
                    if !(face.room && covered(&p)) {
                        out.points.push(p);
                    }
                }
            }
        }
    }
    out
}

fn arc_poses(spec: &SynthSpec) -> Vec<Pose> {
    let n = spec.frames;
    let span = spec.arc_degrees.to_radians();
    (0..n)
        .map(|i| {
            let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let theta = -span / 2.0 + s * span;
            let radial = Vector3::new(theta.cos(), theta.sin(), 0.0);
            let center = spec.arc_radius * radial + Vector3::new(0.0, 0.0, spec.camera_height + 0.1 * (std::f64::consts::TAU * s).sin());
            let yaw = theta + std::f64::consts::PI + 0.25 * (std::f64::consts::PI * s).sin() - 0.12;
            let forward = Vector3::new(yaw.cos(), yaw.sin(), -0.25 + 0.1 * (3.0 * s).cos());
            look_at(center, forward)
        })
        .collect()
}

/// LiDAR-to-camera extrinsic: LiDAR x forward, z up, with a small mounting offset.
fn true_extrinsic(spec: &SynthSpec) -> Pose {
    if spec.identity_extrinsic {
        return Pose::identity();
    }
    let axes = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let tilt = rotation_about(Vector3::new(0.3, 1.0, -0.2), 1.5f64.to_radians());
    Pose::new(tilt.rotation * axes, Vector3::new(0.06, -0.08, 0.04))
}

fn perturb(te: &Pose, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Pose {
    let unit = |rng: &mut ChaCha8Rng| {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() < 1e-3 {
            Vector3::x()
        } else {
            v.normalize()
        }
    };
    let axis = unit(rng);
    let dir = unit(rng);
    let delta = Pose::from_axis_angle(axis, spec.extrinsic_error_deg.to_radians(), dir * spec.extrinsic_error_m);
    delta.compose(te)
}

impl SyntheticWorld {
    fn occluded(&self, from: &Vector3<f64>, to: &Vector3<f64>) -> bool {
        self.obstacles.iter().any(|b| b.blocks(from, to))
    }

    /// True projection of a world point into camera `frame`, if visible.
    pub fn project_visible(&self, frame: usize, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let pose = &self.gt_trajectory[frame];
        let y = pose.transform_point(p);
        if y.z <= 0.05 {
            return None;
        }
        let (px, _) = self.intrinsics.project(&y).ok()?;
        if !self.intrinsics.contains(&px) || self.occluded(&pose.center(), p) {
            return None;
        }
        Some(px)
    }

    pub fn lidar_origin(&self, frame: usize) -> Vector3<f64> {
        self.gt_trajectory[frame].inverse().transform_point(&self.gt_extrinsic.translation)
    }

    /// Frame index whose timestamp matches `t`.
    pub fn frame_at(&self, t: f64) -> Option<usize> {
        nearest_timestamp(&self.timestamps, t, 0.5 / self.spec.frame_rate)
    }

    pub fn groundtruth(&self) -> Vec<(f64, Pose)> {
        self.timestamps.iter().copied().zip(self.gt_trajectory.iter().copied()).collect()
    }

    pub fn matcher(&self) -> GroundTruthMatcher<'_> {
        GroundTruthMatcher { world: self }
    }

    fn make_frame(&self, i: usize) -> Frame {
        let pose = &self.gt_trajectory[i];
        let image = render(&self.gt_map, pose, &self.intrinsics, &RasterConfig::default()).color;
        let lidar_from_world = self.gt_extrinsic.inverse().compose(pose);
        let mut rng = sub_rng(self.seed, 2, i as u64, 0);
        let noise = Normal::new(0.0, self.spec.point_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let [lx, ly, lz] = self.spec.room;
        let points = self.lidar_visible[i]
            .iter()
            .map(|&j| {
                let mut p = self.points[j];
                if self.spec.cloud_outlier_fraction > 0.0 && rng.random_bool(self.spec.cloud_outlier_fraction) {
                    p = Vector3::new(rng.random_range(-lx / 2.0..lx / 2.0), rng.random_range(-ly / 2.0..ly / 2.0), rng.random_range(0.0..lz));
                }
                let mut q = lidar_from_world.transform_point(&p);
                if self.spec.point_noise > 0.0 {
                    q += Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
                }
                q
            })
            .collect();
        Frame { index: i, timestamp: self.timestamps[i], image, cloud: PointCloud::new(points), allow_empty_cloud: false }
    }

    /// Renders images and simulates LiDAR for every pose.
    pub fn frames(&self) -> Vec<Frame> {
        (0..self.gt_trajectory.len()).into_par_iter().map(|i| self.make_frame(i)).collect()
    }
}

/// Builds the world geometry, trajectory and observations without rendering.
pub fn generate_world(spec: &SynthSpec, seed: u64) -> Result<SyntheticWorld, SynthError> {
    spec.validate()?;
    let mut rng = sub_rng(seed, 1, 0, 0);
    let obstacles = place_boxes(spec, &mut rng);
    let mut faces = room_faces(spec);
    for (i, b) in obstacles.iter().enumerate() {
        faces.extend(box_faces(b, &spec.room, 6 + 3 * i));
    }
    let surfaces = sample_surfaces(spec, &faces, &obstacles, &mut rng);
    let gt_extrinsic = true_extrinsic(spec);
    let initial_extrinsic = perturb(&gt_extrinsic, spec, &mut rng);
    let mut world = SyntheticWorld {
        spec: spec.clone(),
        seed,
        intrinsics: spec.intrinsics(),
        gt_map: surfaces.gaussians,
        gt_trajectory: arc_poses(spec),
        timestamps: (0..spec.frames).map(|i| i as f64 / spec.frame_rate).collect(),
        gt_extrinsic,
        initial_extrinsic,
        points: surfaces.points,
        lidar_visible: Vec::new(),
        observations: Vec::new(),
        obstacles,
    };
    let w = &world;
    let per_frame: Vec<(Vec<usize>, Vec<Observation>, usize)> = (0..spec.frames)
        .into_par_iter()
        .map(|i| {
            let origin = w.lidar_origin(i);
            let lidar: Vec<usize> = (0..w.points.len())
                .filter(|&j| (w.points[j] - origin).norm() <= spec.lidar_range && !w.occluded(&origin, &w.points[j]))
                .collect();
            let mut rng = sub_rng(seed, 3, i as u64, 0);
            let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
            let mut obs = Vec::new();
            for &j in &surfaces.landmarks {
                let Some(px) = w.project_visible(i, &w.points[j]) else { continue };
                let mut noisy = px;
                if spec.pixel_noise > 0.0 {
                    noisy += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                }
                if w.intrinsics.contains(&noisy) {
                    obs.push(Observation { point: j, true_pixel: px, pixel: noisy });
                }
            }
            let visible = w.gt_map.iter().filter(|g| w.project_visible(i, &g.position).is_some()).count();
            (lidar, obs, visible)
        })
        .collect();
    for (i, (lidar, obs, visible)) in per_frame.into_iter().enumerate() {
        if visible < spec.min_visible {
            return Err(SynthError::SpecInvalid(format!("pose {i} sees {visible} gaussians, fewer than min_visible {}", spec.min_visible)));
        }
        world.lidar_visible.push(lidar);
        world.observations.push(obs);
    }
    Ok(world)
}

pub fn generate(spec: &SynthSpec, seed: u64) -> Result<(SyntheticWorld, Vec<Frame>), SynthError> {
    let world = generate_world(spec, seed)?;
    let frames = world.frames();
    Ok((world, frames))
}

/// Emits the world's true correspondences with the spec's pixel noise; a
/// fraction of matches is reassigned to a different landmark.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruthMatcher<'w> {
    world: &'w SyntheticWorld,
}

impl Matcher for GroundTruthMatcher<'_> {
    fn match_pair(&self, a: &Frame, b: &Frame) -> Result<Vec<FeatureMatch>, AssociationError> {
        let w = self.world;
        let too_few = |found| AssociationError::TooFewMatches { a: a.index, b: b.index, found, needed: MIN_MATCHES };
        let (Some(ia), Some(ib)) = (w.frame_at(a.timestamp), w.frame_at(b.timestamp)) else {
            return Err(too_few(0));
        };
        let (oa, ob) = (&w.observations[ia], &w.observations[ib]);
        let mut rng = sub_rng(w.seed, 4, ia as u64, ib as u64);
        let mut out = Vec::new();
        let mut j = 0;
        for x in oa {
            while j < ob.len() && ob[j].point < x.point {
                j += 1;
            }
            if j == ob.len() {
                break;
            }
            if ob[j].point != x.point {
                continue;
            }
            let mut y = ob[j];
            if w.spec.outlier_fraction > 0.0 && ob.len() > 1 && rng.random_bool(w.spec.outlier_fraction) {
                let mut k = rng.random_range(0..ob.len() - 1);
                if k >= j {
                    k += 1;
                }
                y = ob[k];
            }
            out.push(FeatureMatch {
                frame_a: a.index,
                frame_b: b.index,
                key_a: x.point,
                key_b: y.point,
                pixel_a: x.pixel,
                pixel_b: y.pixel,
                lifted_a: None,
                lifted_b: None,
            });
        }
        if out.len() < MIN_MATCHES {
            return Err(too_few(out.len()));
        }
        Ok(out)
    }
}

/// Writes the frames in the generic dataset layout together with the spec,
/// seed and true extrinsic so the world can be regenerated from disk.
pub fn write_world(root: &Path, world: &SyntheticWorld, frames: &[Frame]) -> Result<(), SynthError> {
    let calib = Calibration { intrinsics: world.intrinsics, extrinsic: world.initial_extrinsic };
    write_generic_dataset(root, &calib, frames, Some(&world.groundtruth()))?;
    let spec_text = format!("seed = {}\n\n[spec]\n{}", world.seed, world.spec.to_toml());
    let io = |path: PathBuf| move |source| SynthError::Io { path, source };
    let spec_path = root.join(SPEC_FILE);
    write_atomic(&spec_path, spec_text.as_bytes()).map_err(io(spec_path.clone()))?;
    let te = Calibration { intrinsics: world.intrinsics, extrinsic: world.gt_extrinsic };
    let te_path = root.join(GT_EXTRINSIC_FILE);
    write_atomic(&te_path, crate::ingest::encode_calibration(&te).as_bytes()).map_err(io(te_path.clone()))?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    seed: u64,
    #[serde(default)]
    spec: SynthSpec,
}

/// Reads the `(spec, seed)` stored by [`write_world`], if `root` holds one.
pub fn read_world_spec(root: &Path) -> Result<Option<(SynthSpec, u64)>, SynthError> {
    let path = root.join(SPEC_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|source| SynthError::Io { path: path.clone(), source })?;
    let f: SpecFile = toml::from_str(&text).map_err(|e| SynthError::SpecInvalid(format!("{}: {e}", path.display())))?;
    Ok(Some((f.spec, f.seed)))
}
