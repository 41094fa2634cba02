//! Dataset loading and file formats: TUM RGB-D sequences, the generic
//! image + cloud layout, PLY clouds, PNG images and TUM trajectories.
//!
//! Generic layout (one directory):
//! ```text
//! calib.txt            intrinsics + initial LiDAR-to-camera extrinsic
//! timestamps.txt       "index timestamp" per frame
//! rgb/NNNNNN.png       8-bit RGB
//! cloud/NNNNNN.ply     LiDAR points in the LiDAR frame
//! groundtruth.txt      optional, TUM trajectory format
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Cursor, Read};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::fsutil::{fmt_f64, write_atomic};
use crate::geom::{CameraIntrinsics, Pose};
pub use crate::imaging::{ColorImage, DepthMap};

/// TUM depth PNG scale: raw value / 5000 = meters.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;
pub const TUM_ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing index file {0}")]
    MissingIndexFile(PathBuf),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("ply error on {path}: {msg}")]
    Ply { path: PathBuf, msg: String },
    #[error("frame {index}: {msg}")]
    InvalidFrame { index: usize, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// Per-point unit normals; `None` entries mark points whose neighborhood
    /// was too degenerate to fit a plane.
    pub normals: Option<Vec<Option<Vector3<f64>>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points, normals: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn normal(&self, i: usize) -> Option<Vector3<f64>> {
        self.normals.as_ref().and_then(|n| n[i])
    }

    pub fn transformed(&self, t: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.transform_point(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| n.map(|n| t.transform_vector(&n))).collect()),
        }
    }
}

/// One time step: image and the point cloud captured with it.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub image: ColorImage,
    /// Points in the sensor frame (LiDAR, or the depth camera for RGB-D data).
    pub cloud: PointCloud,
    /// Set when an empty cloud is expected rather than a loading failure.
    pub allow_empty_cloud: bool,
}

impl Frame {
    pub fn validate(&self, k: &CameraIntrinsics) -> Result<(), IngestError> {
        if self.image.width != k.width || self.image.height != k.height {
            return Err(IngestError::InvalidFrame {
                index: self.index,
                msg: format!(
                    "image is {}x{} but intrinsics say {}x{}",
                    self.image.width, self.image.height, k.width, k.height
                ),
            });
        }
        if self.cloud.is_empty() && !self.allow_empty_cloud {
            return Err(IngestError::InvalidFrame { index: self.index, msg: "empty point cloud".into() });
        }
        if self.cloud.points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(IngestError::InvalidFrame { index: self.index, msg: "non-finite cloud point".into() });
        }
        Ok(())
    }
}

/// Back-projects every valid pixel on a `pixel_stride` grid.
pub fn depth_to_cloud(d: &DepthMap, k: &CameraIntrinsics, pixel_stride: usize) -> PointCloud {
    let stride = pixel_stride.max(1);
    let mut points = Vec::new();
    for v in (0..d.height).step_by(stride) {
        for u in (0..d.width).step_by(stride) {
            if let Some(z) = d.get(u, v) {
                points.push(k.unproject(&Vector2::new(u as f64, v as f64), z));
            }
        }
    }
    PointCloud::new(points)
}

// ---------------------------------------------------------------- images

pub fn read_color_png(path: &Path) -> Result<ColorImage, IngestError> {
    let img = image::open(path).map_err(|e| IngestError::Image { path: path.into(), msg: e.to_string() })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.pixels().map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]).collect();
    Ok(ColorImage { width: w as usize, height: h as usize, data })
}

pub fn encode_color_png(img: &ColorImage) -> Vec<u8> {
    let to8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width as u32, img.height as u32, |u, v| {
            let c = img.get(u as usize, v as usize);
            Rgb([to8(c[0]), to8(c[1]), to8(c[2])])
        });
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(buf).write_to(&mut out, ImageFormat::Png).expect("png encoding to memory");
    out.into_inner()
}

pub fn write_color_png(path: &Path, img: &ColorImage) -> Result<(), IngestError> {
    write_atomic(path, &encode_color_png(img)).map_err(io_err(path))
}

/// Reads a 16-bit depth PNG; zero marks an invalid pixel.
pub fn read_depth_png(path: &Path, scale: f64) -> Result<DepthMap, IngestError> {
    let img = image::open(path).map_err(|e| IngestError::Image { path: path.into(), msg: e.to_string() })?;
    let l = img.to_luma16();
    let (w, h) = l.dimensions();
    let mut d = DepthMap::empty(w as usize, h as usize);
    for (u, v, p) in l.enumerate_pixels() {
        if p[0] > 0 {
            d.set(u as usize, v as usize, p[0] as f64 / scale);
        }
    }
    Ok(d)
}

pub fn encode_depth_png(width: usize, height: usize, values: &[f64], scale: f64) -> Vec<u8> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(width as u32, height as u32, |u, v| {
        let z = values[v as usize * width + u as usize];
        Luma([(z * scale).round().clamp(0.0, u16::MAX as f64) as u16])
    });
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageLuma16(buf).write_to(&mut out, ImageFormat::Png).expect("png encoding to memory");
    out.into_inner()
}

pub fn write_depth_png(path: &Path, width: usize, height: usize, values: &[f64], scale: f64) -> Result<(), IngestError> {
    write_atomic(path, &encode_depth_png(width, height, values, scale)).map_err(io_err(path))
}

// ---------------------------------------------------------------- PLY

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

pub fn read_ply(path: &Path) -> Result<PointCloud, IngestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_ply(&bytes).map_err(|msg| IngestError::Ply { path: path.into(), msg })
}

fn parse_ply(bytes: &[u8]) -> Result<PointCloud, String> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let mut binary = false;
    let mut vertex_count = 0usize;
    let mut in_vertex = false;
    let mut props: Vec<(String, PlyScalar)> = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(|e| e.to_string())? == 0 {
            return Err("unexpected end of header".into());
        }
        let t = line.trim();
        if first {
            if t != "ply" {
                return Err("missing 'ply' magic".into());
            }
            first = false;
            continue;
        }
        let tok: Vec<&str> = t.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", ..] => binary = false,
            ["format", "binary_little_endian", ..] => binary = true,
            ["format", other, ..] => return Err(format!("unsupported format {other}")),
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = n.parse().map_err(|_| "bad vertex count".to_string())?;
                } else if vertex_count == 0 {
                    return Err("vertex element must come first".into());
                }
            }
            ["property", "list", ..] if in_vertex => return Err("list properties on vertices are unsupported".into()),
            ["property", ty, name] if in_vertex => {
                let s = PlyScalar::parse(ty).ok_or_else(|| format!("unknown property type {ty}"))?;
                props.push((name.to_string(), s));
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let find = |n: &str| props.iter().position(|(p, _)| p == n);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err("vertex element lacks x/y/z".into()),
    };
    let normal_idx = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut values = vec![0.0f64; props.len()];
    let mut points = Vec::with_capacity(vertex_count);
    let mut normals = Vec::with_capacity(if normal_idx.is_some() { vertex_count } else { 0 });
    let record: usize = props.iter().map(|p| p.1.size()).sum();
    let mut rec = vec![0u8; record];
    let mut text = String::new();
    for _ in 0..vertex_count {
        if binary {
            reader.read_exact(&mut rec).map_err(|_| "truncated binary body".to_string())?;
            let mut off = 0;
            for (k, (_, s)) in props.iter().enumerate() {
                values[k] = s.read_le(&rec[off..]);
                off += s.size();
            }
        } else {
            text.clear();
            if reader.read_line(&mut text).map_err(|e| e.to_string())? == 0 {
                return Err("truncated ascii body".into());
            }
            let mut it = text.split_whitespace();
            for v in values.iter_mut() {
                *v = it
                    .next()
                    .ok_or("short ascii vertex line")?
                    .parse()
                    .map_err(|_| "bad number in ascii body".to_string())?;
            }
        }
        points.push(Vector3::new(values[ix], values[iy], values[iz]));
        if let Some((a, b, c)) = normal_idx {
            let n = Vector3::new(values[a], values[b], values[c]);
            let len = n.norm();
            normals.push((len > 0.5).then(|| n / len));
        }
    }
    Ok(PointCloud { points, normals: normal_idx.map(|_| normals) })
}

pub fn encode_ply(cloud: &PointCloud, binary: bool) -> Vec<u8> {
    let has_normals = cloud.normals.is_some();
    let mut out = String::new();
    out.push_str("ply\n");
    out.push_str(if binary { "format binary_little_endian 1.0\n" } else { "format ascii 1.0\n" });
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in ["x", "y", "z"] {
        out.push_str(&format!("property float {p}\n"));
    }
    if has_normals {
        for p in ["nx", "ny", "nz"] {
            out.push_str(&format!("property float {p}\n"));
        }
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    for (i, p) in cloud.points.iter().enumerate() {
        let mut vals = vec![p.x as f32, p.y as f32, p.z as f32];
        if has_normals {
            let n = cloud.normal(i).unwrap_or_else(Vector3::zeros);
            vals.extend([n.x as f32, n.y as f32, n.z as f32]);
        }
        if binary {
            for v in vals {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        } else {
            let line: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
            bytes.extend_from_slice(line.join(" ").as_bytes());
            bytes.push(b'\n');
        }
    }
    bytes
}

pub fn write_ply(path: &Path, cloud: &PointCloud, binary: bool) -> Result<(), IngestError> {
    write_atomic(path, &encode_ply(cloud, binary)).map_err(io_err(path))
}

// ---------------------------------------------------------------- trajectories

/// One TUM trajectory line for a world-to-camera pose; the file stores the
/// camera-to-world transform.
pub fn format_trajectory_line(timestamp: f64, pose: &Pose) -> String {
    let c2w = pose.inverse();
    let t = c2w.translation;
    let q = c2w.quaternion();
    format!(
        "{:.6} {} {} {} {} {} {} {}",
        timestamp,
        fmt_f64(t.x),
        fmt_f64(t.y),
        fmt_f64(t.z),
        fmt_f64(q[0]),
        fmt_f64(q[1]),
        fmt_f64(q[2]),
        fmt_f64(q[3])
    )
}

pub fn encode_trajectory(traj: &[(f64, Pose)]) -> String {
    let mut s = String::new();
    for (t, p) in traj {
        s.push_str(&format_trajectory_line(*t, p));
        s.push('\n');
    }
    s
}

pub fn write_trajectory(path: &Path, traj: &[(f64, Pose)]) -> Result<(), IngestError> {
    write_atomic(path, encode_trajectory(traj).as_bytes()).map_err(io_err(path))
}

/// Parses "tx ty tz qx qy qz qw" into the transform it describes.
pub fn parse_pose_fields(fields: &[&str]) -> Option<Pose> {
    if fields.len() != 7 {
        return None;
    }
    let v: Vec<f64> = fields.iter().map(|s| s.parse().ok()).collect::<Option<_>>()?;
    Some(Pose::from_quaternion(Vector3::new(v[0], v[1], v[2]), [v[3], v[4], v[5], v[6]]))
}

pub fn format_pose_fields(p: &Pose) -> String {
    let t = p.translation;
    let q = p.quaternion();
    [t.x, t.y, t.z, q[0], q[1], q[2], q[3]].iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ")
}

/// Reads a TUM trajectory and returns world-to-camera poses.
pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>, IngestError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        let parse_err = || IngestError::Parse { path: path.into(), line: n + 1, msg: "expected 8 numeric fields".into() };
        if fields.len() != 8 {
            return Err(parse_err());
        }
        let ts: f64 = fields[0].parse().map_err(|_| parse_err())?;
        let c2w = parse_pose_fields(&fields[1..]).ok_or_else(parse_err)?;
        out.push((ts, c2w.inverse()));
    }
    Ok(out)
}

// ---------------------------------------------------------------- TUM RGB-D

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub timestamp: f64,
    pub path: String,
}

/// Parses a whitespace-separated "timestamp path" index, skipping comments.
pub fn read_index_file(path: &Path) -> Result<Vec<IndexEntry>, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingIndexFile(path.into()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut it = t.split_whitespace();
        let ts = it.next().and_then(|s| s.parse::<f64>().ok());
        let p = it.next();
        match (ts, p) {
            (Some(timestamp), Some(p)) => out.push(IndexEntry { timestamp, path: p.to_string() }),
            _ => {
                return Err(IngestError::Parse { path: path.into(), line: n + 1, msg: "expected 'timestamp path'".into() })
            }
        }
    }
    Ok(out)
}

/// Index of the entry nearest in time to `t` within `tolerance`; `sorted` must be ascending.
pub fn nearest_timestamp(sorted: &[f64], t: f64, tolerance: f64) -> Option<usize> {
    if sorted.is_empty() {
        return None;
    }
    let pos = sorted.partition_point(|&x| x < t);
    let mut best: Option<(usize, f64)> = None;
    for i in [pos.wrapping_sub(1), pos] {
        if i < sorted.len() {
            let d = (sorted[i] - t).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
    }
    best.filter(|&(_, d)| d <= tolerance).map(|(i, _)| i)
}

#[derive(Debug, Clone)]
pub struct TumOptions {
    pub stride: usize,
    pub max_frames: usize,
    pub tolerance: f64,
    pub depth_scale: f64,
    pub pixel_stride: usize,
    pub intrinsics: CameraIntrinsics,
}

impl TumOptions {
    /// Freiburg 1 intrinsics at 640x480.
    pub fn freiburg1() -> Self {
        Self {
            stride: 1,
            max_frames: usize::MAX,
            tolerance: TUM_ASSOCIATION_TOLERANCE,
            depth_scale: TUM_DEPTH_SCALE,
            pixel_stride: 4,
            intrinsics: CameraIntrinsics { fx: 517.3, fy: 516.5, cx: 318.6, cy: 255.3, width: 640, height: 480 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TumAssociation {
    pub timestamp: f64,
    pub rgb: String,
    pub depth: String,
    pub groundtruth: Option<Pose>,
}

/// Associates rgb, depth and (optional) ground truth rows and subsamples them.
pub fn associate_tum(root: &Path, opts: &TumOptions) -> Result<Vec<TumAssociation>, IngestError> {
    let rgb = read_index_file(&root.join("rgb.txt"))?;
    let mut depth = read_index_file(&root.join("depth.txt"))?;
    depth.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let depth_ts: Vec<f64> = depth.iter().map(|e| e.timestamp).collect();
    let gt_path = root.join("groundtruth.txt");
    let gt = if gt_path.exists() { Some(read_trajectory(&gt_path)?) } else { None };
    let gt_ts: Vec<f64> = gt.as_ref().map(|g| g.iter().map(|x| x.0).collect()).unwrap_or_default();

    let mut assoc = Vec::new();
    for e in &rgb {
        match nearest_timestamp(&depth_ts, e.timestamp, opts.tolerance) {
            Some(di) => {
                let groundtruth = gt.as_ref().and_then(|g| {
                    nearest_timestamp(&gt_ts, e.timestamp, opts.tolerance).map(|gi| g[gi].1)
                });
                assoc.push(TumAssociation {
                    timestamp: e.timestamp,
                    rgb: e.path.clone(),
                    depth: depth[di].path.clone(),
                    groundtruth,
                });
            }
            None => log::warn!("no depth within {} s of rgb frame at {}; dropped", opts.tolerance, e.timestamp),
        }
    }
    Ok(assoc.into_iter().step_by(opts.stride.max(1)).take(opts.max_frames).collect())
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub intrinsics: CameraIntrinsics,
    /// Initial LiDAR-to-camera extrinsic.
    pub extrinsic: Pose,
    /// Ground-truth world-to-camera poses, if known.
    pub groundtruth: Option<Vec<(f64, Pose)>>,
}

pub fn load_tum_sequence(root: &Path, opts: &TumOptions) -> Result<Sequence, IngestError> {
    let assoc = associate_tum(root, opts)?;
    let k = opts.intrinsics;
    let frames = assoc
        .par_iter()
        .enumerate()
        .map(|(index, a)| {
            let image = read_color_png(&root.join(&a.rgb))?;
            let depth = read_depth_png(&root.join(&a.depth), opts.depth_scale)?;
            let cloud = depth_to_cloud(&depth, &k, opts.pixel_stride);
            let frame = Frame { index, timestamp: a.timestamp, image, cloud, allow_empty_cloud: true };
            frame.validate(&k)?;
            Ok(frame)
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    let groundtruth = if assoc.iter().all(|a| a.groundtruth.is_some()) && !assoc.is_empty() {
        Some(assoc.iter().map(|a| (a.timestamp, a.groundtruth.unwrap())).collect())
    } else {
        None
    };
    Ok(Sequence { frames, intrinsics: k, extrinsic: Pose::identity(), groundtruth })
}

// ---------------------------------------------------------------- generic layout

pub fn frame_file_stem(index: usize) -> String {
    format!("{index:06}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub extrinsic: Pose,
}

pub fn encode_calibration(c: &Calibration) -> String {
    let k = &c.intrinsics;
    format!(
        "# fx fy cx cy width height\nintrinsics {} {} {} {} {} {}\n# LiDAR-to-camera: tx ty tz qx qy qz qw\nextrinsic {}\n",
        fmt_f64(k.fx),
        fmt_f64(k.fy),
        fmt_f64(k.cx),
        fmt_f64(k.cy),
        k.width,
        k.height,
        format_pose_fields(&c.extrinsic)
    )
}

pub fn read_calibration(path: &Path) -> Result<Calibration, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut intrinsics = None;
    let mut extrinsic = None;
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = t.split_whitespace().collect();
        let err = |msg: &str| IngestError::Parse { path: path.into(), line: n + 1, msg: msg.into() };
        match tok[0] {
            "intrinsics" => {
                if tok.len() != 7 {
                    return Err(err("intrinsics needs fx fy cx cy width height"));
                }
                let f: Vec<f64> = tok[1..5].iter().map(|s| s.parse().map_err(|_| err("bad number"))).collect::<Result<_, _>>()?;
                let w: usize = tok[5].parse().map_err(|_| err("bad width"))?;
                let h: usize = tok[6].parse().map_err(|_| err("bad height"))?;
                let k = CameraIntrinsics::new(f[0], f[1], f[2], f[3], w, h).map_err(|e| err(&e.to_string()))?;
                intrinsics = Some(k);
            }
            "extrinsic" => extrinsic = Some(parse_pose_fields(&tok[1..]).ok_or_else(|| err("extrinsic needs 7 numbers"))?),
            other => return Err(err(&format!("unknown key '{other}'"))),
        }
    }
    let missing = |what: &str| IngestError::Parse { path: path.into(), line: 0, msg: format!("missing {what}") };
    Ok(Calibration {
        intrinsics: intrinsics.ok_or_else(|| missing("intrinsics"))?,
        extrinsic: extrinsic.ok_or_else(|| missing("extrinsic"))?,
    })
}

/// Persists frames in the generic layout.
pub fn write_generic_dataset(
    root: &Path,
    calib: &Calibration,
    frames: &[Frame],
    groundtruth: Option<&[(f64, Pose)]>,
) -> Result<(), IngestError> {
    fs::create_dir_all(root.join("rgb")).map_err(io_err(root))?;
    fs::create_dir_all(root.join("cloud")).map_err(io_err(root))?;
    write_atomic(&root.join("calib.txt"), encode_calibration(calib).as_bytes()).map_err(io_err(root))?;
    let mut ts = String::new();
    for f in frames {
        ts.push_str(&format!("{} {:.6}\n", f.index, f.timestamp));
    }
    write_atomic(&root.join("timestamps.txt"), ts.as_bytes()).map_err(io_err(root))?;
    frames.par_iter().try_for_each(|f| {
        let stem = frame_file_stem(f.index);
        write_color_png(&root.join("rgb").join(format!("{stem}.png")), &f.image)?;
        write_ply(&root.join("cloud").join(format!("{stem}.ply")), &f.cloud, true)
    })?;
    if let Some(gt) = groundtruth {
        write_trajectory(&root.join("groundtruth.txt"), gt)?;
    }
    Ok(())
}

pub fn load_generic_dataset(root: &Path, stride: usize, max_frames: usize) -> Result<Sequence, IngestError> {
    let calib_path = root.join("calib.txt");
    if !calib_path.exists() {
        return Err(IngestError::MissingIndexFile(calib_path));
    }
    let calib = read_calibration(&calib_path)?;
    let ts_path = root.join("timestamps.txt");
    if !ts_path.exists() {
        return Err(IngestError::MissingIndexFile(ts_path));
    }
    let text = fs::read_to_string(&ts_path).map_err(io_err(&ts_path))?;
    let mut entries: BTreeMap<usize, f64> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut it = t.split_whitespace();
        let parsed = (it.next().and_then(|s| s.parse().ok()), it.next().and_then(|s| s.parse().ok()));
        match parsed {
            (Some(i), Some(ts)) => {
                entries.insert(i, ts);
            }
            _ => return Err(IngestError::Parse { path: ts_path.clone(), line: n + 1, msg: "expected 'index timestamp'".into() }),
        }
    }
    let selected: Vec<(usize, f64)> = entries.into_iter().step_by(stride.max(1)).take(max_frames).collect();
    let k = calib.intrinsics;
    let frames = selected
        .par_iter()
        .enumerate()
        .map(|(index, &(file_index, timestamp))| {
            let stem = frame_file_stem(file_index);
            let image = read_color_png(&root.join("rgb").join(format!("{stem}.png")))?;
            let cloud = read_ply(&root.join("cloud").join(format!("{stem}.ply")))?;
            let frame = Frame { index, timestamp, image, cloud, allow_empty_cloud: false };
            frame.validate(&k)?;
            Ok(frame)
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    let gt_path = root.join("groundtruth.txt");
    let groundtruth = if gt_path.exists() { Some(read_trajectory(&gt_path)?) } else { None };
    Ok(Sequence { frames, intrinsics: k, extrinsic: calib.extrinsic, groundtruth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project_point;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 90.0, 40.0, 30.0, 80, 60).unwrap()
    }

    #[test]
    fn principal_point_unprojects_on_axis() {
        let mut d = DepthMap::empty(80, 60);
        d.set(40, 30, 2.0);
        let c = depth_to_cloud(&d, &k(), 1);
        assert_eq!(c.points, vec![Vector3::new(0.0, 0.0, 2.0)]);
    }

    #[test]
    fn invalid_depth_gives_empty_cloud() {
        let d = DepthMap::empty(80, 60);
        assert!(depth_to_cloud(&d, &k(), 1).is_empty());
    }

    #[test]
    fn depth_cloud_projects_back_to_its_pixel() {
        let kk = k();
        let mut d = DepthMap::empty(80, 60);
        for v in 0..60 {
            for u in 0..80 {
                if (u + v) % 3 != 0 {
                    d.set(u, v, 0.5 + 0.01 * (u as f64) + 0.02 * v as f64);
                }
            }
        }
        let cloud = depth_to_cloud(&d, &kk, 1);
        let mut n = 0;
        for v in 0..60 {
            for u in 0..80 {
                if d.get(u, v).is_some() {
                    let (px, _) = project_point(&kk, &cloud.points[n]).unwrap();
                    assert!((px - Vector2::new(u as f64, v as f64)).norm() < 1e-6);
                    n += 1;
                }
            }
        }
        assert_eq!(n, cloud.len());
    }

    #[test]
    fn trajectory_line_format() {
        assert_eq!(format_trajectory_line(0.0, &Pose::identity()), "0.000000 0 0 0 0 0 0 1");
        // A world-to-camera pose whose camera sits at (1, 2, 3).
        let p = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)).inverse();
        assert!(format_trajectory_line(1.5, &p).contains("1 2 3"));
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let traj: Vec<(f64, Pose)> = (0..5)
            .map(|i| {
                let p = Pose::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.3 * i as f64, Vector3::new(i as f64, -0.5, 0.25));
                (i as f64 * 0.1, p)
            })
            .collect();
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for (a, b) in traj.iter().zip(&back) {
            assert!((a.0 - b.0).abs() < 1e-6);
            assert!((a.1.rotation - b.1.rotation).abs().max() < 1e-6);
            assert!((a.1.translation - b.1.translation).abs().max() < 1e-6);
        }
    }

    #[test]
    fn timestamp_association_tolerance() {
        let depth = [9.9, 10.015, 10.3];
        assert_eq!(nearest_timestamp(&depth, 10.0, 0.02), Some(1));
        let depth = [9.9, 10.05, 10.3];
        assert_eq!(nearest_timestamp(&depth, 10.0, 0.02), None);
    }

    fn write_index(path: &Path, rows: &[(f64, String)]) {
        let mut s = String::from("# timestamp filename\n");
        for (t, p) in rows {
            s.push_str(&format!("{t:.6} {p}\n"));
        }
        fs::write(path, s).unwrap();
    }

    #[test]
    fn tum_stride_and_cap() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<(f64, String)> = (0..2000).map(|i| (i as f64 * 0.033, format!("rgb/{i}.png"))).collect();
        let depth: Vec<(f64, String)> = (0..2000).map(|i| (i as f64 * 0.033 + 0.004, format!("depth/{i}.png"))).collect();
        write_index(&dir.path().join("rgb.txt"), &rgb);
        write_index(&dir.path().join("depth.txt"), &depth);
        let mut opts = TumOptions::freiburg1();
        opts.stride = 4;
        opts.max_frames = 500;
        let a = associate_tum(dir.path(), &opts).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a[1].rgb, "rgb/4.png");
        // deterministic
        assert_eq!(a, associate_tum(dir.path(), &opts).unwrap());
    }

    #[test]
    fn tum_missing_index() {
        let dir = tempfile::tempdir().unwrap();
        let err = associate_tum(dir.path(), &TumOptions::freiburg1()).unwrap_err();
        assert!(matches!(err, IngestError::MissingIndexFile(_)));
    }

    #[test]
    fn tum_drops_unassociated_rows() {
        let dir = tempfile::tempdir().unwrap();
        write_index(&dir.path().join("rgb.txt"), &[(10.0, "a.png".into()), (11.0, "b.png".into())]);
        write_index(&dir.path().join("depth.txt"), &[(10.05, "da.png".into()), (11.01, "db.png".into())]);
        let a = associate_tum(dir.path(), &TumOptions::freiburg1()).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].depth, "db.png");
    }

    #[test]
    fn tum_sequence_loads_images_and_depth() {
        let dir = tempfile::tempdir().unwrap();
        let kk = CameraIntrinsics::new(20.0, 20.0, 4.0, 3.0, 8, 6).unwrap();
        fs::create_dir_all(dir.path().join("rgb")).unwrap();
        fs::create_dir_all(dir.path().join("depth")).unwrap();
        let img = ColorImage::new(8, 6, [0.2, 0.4, 0.6]);
        let depth: Vec<f64> = (0..48).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        for i in 0..3 {
            write_color_png(&dir.path().join(format!("rgb/{i}.png")), &img).unwrap();
            write_depth_png(&dir.path().join(format!("depth/{i}.png")), 8, 6, &depth, TUM_DEPTH_SCALE).unwrap();
        }
        write_index(&dir.path().join("rgb.txt"), &(0..3).map(|i| (i as f64, format!("rgb/{i}.png"))).collect::<Vec<_>>());
        write_index(&dir.path().join("depth.txt"), &(0..3).map(|i| (i as f64 + 0.01, format!("depth/{i}.png"))).collect::<Vec<_>>());
        let mut opts = TumOptions::freiburg1();
        opts.intrinsics = kk;
        opts.pixel_stride = 1;
        let seq = load_tum_sequence(dir.path(), &opts).unwrap();
        assert_eq!(seq.frames.len(), 3);
        assert_eq!(seq.frames[0].cloud.len(), 24);
        assert!(seq.frames[0].cloud.points.iter().all(|p| (p.z - 1.0).abs() < 1e-12));
        assert!((seq.frames[2].image.get(3, 3)[1] - 0.4).abs() < 1.0 / 255.0);
    }

    #[test]
    fn ply_ascii_and_binary_round_trip() {
        let cloud = PointCloud {
            points: vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-0.5, 0.25, 8.0)],
            normals: Some(vec![Some(Vector3::new(0.0, 0.0, 1.0)), None]),
        };
        for binary in [false, true] {
            let back = parse_ply(&encode_ply(&cloud, binary)).unwrap();
            assert_eq!(back, cloud);
        }
        assert!(parse_ply(b"not a ply").is_err());
    }

    #[test]
    fn ply_with_extra_properties() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1.5 2.5 3.5 255\n";
        let c = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(c.points, vec![Vector3::new(1.5, 2.5, 3.5)]);
        assert!(c.normals.is_none());
    }

    #[test]
    fn depth_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let vals = vec![0.0, 1.0, 2.5, 13.1];
        write_depth_png(&path, 2, 2, &vals, TUM_DEPTH_SCALE).unwrap();
        let d = read_depth_png(&path, TUM_DEPTH_SCALE).unwrap();
        assert_eq!(d.get(0, 0), None);
        assert!((d.get(1, 1).unwrap() - 13.1).abs() < 1e-3);
    }

    #[test]
    fn calibration_round_trip() {
        let c = Calibration {
            intrinsics: k(),
            extrinsic: Pose::from_axis_angle(Vector3::new(0.2, 1.0, 0.1), 1.2, Vector3::new(0.05, -0.1, 0.02)),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        fs::write(&path, encode_calibration(&c)).unwrap();
        let back = read_calibration(&path).unwrap();
        assert_eq!(back.intrinsics, c.intrinsics);
        assert!((back.extrinsic.rotation - c.extrinsic.rotation).abs().max() < 1e-12);
    }
}
