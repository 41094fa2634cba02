//! End-to-end runs and the artifact-level commands behind the CLI.

mod config;

pub use config::{
    DatasetFormat, DatasetSection, JointSection, MappingSection, MatcherKind, MatchingSection, OutputSection,
    PipelineConfig, PosegraphSection, RelmotionSection,
};

use crate::association::{Matcher, NccMatcher};
use crate::fsutil::{fmt_f64, write_atomic};
use crate::geom::{CameraIntrinsics, Pose};
use crate::imaging::ColorImage;
use crate::ingest::{
    encode_calibration, frame_file_stem, load_generic_dataset, load_tum_sequence, nearest_timestamp, read_calibration,
    read_trajectory, write_color_png, write_depth_png, write_trajectory, Calibration, Frame, IngestError, PointCloud,
    Sequence, TumOptions,
};
use crate::jointrefine::{format_history, refine_with_extrinsic_iterations, RefineError};
use crate::metrics::{ate, encode_metrics_csv, encode_report, psnr, ssim_score, AteReport, MetricsError, MetricsRow};
use crate::splatmap::{optimize_map, read_map, render, write_map, GaussianMap, Keyframe, RasterConfig, SplatError};
use crate::synthgen::{generate, generate_world, read_world_spec, write_world, SynthError, SynthSpec, SyntheticWorld};
use log::info;
use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const EXTRINSIC_FILE: &str = "extrinsic.txt";
pub const HISTORY_FILE: &str = "extrinsic_history.txt";
pub const MAP_FILE: &str = "map.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const EVAL_FILE: &str = "eval_metrics.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const EVAL_REPORT_FILE: &str = "eval_report.txt";

/// Timestamp tolerance when pairing trajectory rows with frames.
const FRAME_TIME_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("[{stage}] {message}")]
    Stage { stage: &'static str, message: String },
    #[error("missing artifact {0}")]
    MissingArtifacts(PathBuf),
    #[error("frame {index} out of range (sequence has {len} frames)")]
    FrameOutOfRange { index: usize, len: usize },
}

impl PipelineError {
    /// 1 for configuration problems, 2 for failures inside a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }

    fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage { stage, message: e.to_string() }
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::SpecInvalid(_) => PipelineError::Config(e.to_string()),
            other => PipelineError::stage("synthgen", other),
        }
    }
}

fn output_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::stage("output", e)
}

fn require(path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifacts(path))
    }
}

// ---------------------------------------------------------------- dataset

pub fn resolve_format(cfg: &DatasetSection) -> Result<DatasetFormat, PipelineError> {
    match cfg.format {
        DatasetFormat::Auto if cfg.path.join("calib.txt").exists() => Ok(DatasetFormat::Generic),
        DatasetFormat::Auto if cfg.path.join("rgb.txt").exists() => Ok(DatasetFormat::Tum),
        DatasetFormat::Auto => Err(PipelineError::Config(format!(
            "cannot tell the layout of {}: expected calib.txt or rgb.txt",
            cfg.path.display()
        ))),
        f => Ok(f),
    }
}

pub fn load_sequence(cfg: &PipelineConfig) -> Result<Sequence, PipelineError> {
    cfg.check_paths()?;
    let d = &cfg.dataset;
    let max = if d.max_frames == 0 { usize::MAX } else { d.max_frames };
    let seq = match resolve_format(d)? {
        DatasetFormat::Tum => {
            let opts = TumOptions {
                stride: d.stride,
                max_frames: max,
                depth_scale: d.tum_depth_scale,
                pixel_stride: d.tum_pixel_stride,
                ..TumOptions::freiburg1()
            };
            load_tum_sequence(&d.path, &opts)
        }
        _ => load_generic_dataset(&d.path, d.stride, max),
    }
    .map_err(|e| PipelineError::stage("ingest", e))?;
    if seq.frames.is_empty() {
        return Err(PipelineError::stage("ingest", "dataset has no frames"));
    }
    Ok(seq)
}

/// The synthetic world a dataset was generated from, if `synth` wrote it.
pub fn dataset_world(path: &Path) -> Result<Option<SyntheticWorld>, PipelineError> {
    match read_world_spec(path)? {
        Some((spec, seed)) => Ok(Some(generate_world(&spec, seed)?)),
        None => Ok(None),
    }
}

fn scene_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().replace(',', "_")).unwrap_or_else(|| "scene".into())
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeScore {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean |rendered - LiDAR| depth over pixels with a LiDAR return.
    pub depth_l1: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub ate: Option<AteReport>,
    pub keyframes: Vec<KeyframeScore>,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_l1: f64,
}

impl Evaluation {
    pub fn row(&self, scene: &str) -> MetricsRow {
        MetricsRow { scene: scene.to_string(), ate_cm: self.ate.as_ref().map_or(f64::NAN, |a| 100.0 * a.rmse), psnr: self.psnr, ssim: self.ssim }
    }
}

/// Pose of every frame, looked up in a trajectory by timestamp.
fn poses_for_frames(frames: &[Frame], traj: &[(f64, Pose)], source: &Path) -> Result<Vec<Pose>, PipelineError> {
    let mut sorted = traj.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let times: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    frames
        .iter()
        .map(|f| {
            nearest_timestamp(&times, f.timestamp, FRAME_TIME_TOLERANCE).map(|i| sorted[i].1).ok_or_else(|| {
                PipelineError::stage("eval", format!("{} has no pose for frame {} (t = {})", source.display(), f.index, f.timestamp))
            })
        })
        .collect()
}

/// Frames the mapper stores as keyframes.
pub fn keyframe_ids(n: usize, stride: usize) -> Vec<usize> {
    (0..n).filter(|i| i % stride.max(1) == 0).collect()
}

pub fn score_keyframe(
    frame: &Frame,
    pose: &Pose,
    extrinsic: &Pose,
    k: &CameraIntrinsics,
    map: &GaussianMap,
    raster: &RasterConfig,
) -> Result<KeyframeScore, MetricsError> {
    let out = render(map.gaussians(), pose, k, raster);
    let kf = Keyframe::from_frame(frame, *pose, extrinsic, k);
    let (sum, count) = out
        .depth
        .iter()
        .zip(&kf.depth.values)
        .zip(&kf.depth.mask)
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, c), ((d, l), _)| (s + (d - l).abs(), c + 1));
    Ok(KeyframeScore {
        frame: frame.index,
        psnr: psnr(&out.color, &frame.image)?,
        ssim: ssim_score(&out.color, &frame.image).map_err(|_| MetricsError::DimensionMismatch(out.width, out.height, frame.image.width, frame.image.height))?,
        depth_l1: if count == 0 { 0.0 } else { sum / count as f64 },
    })
}

/// ATE of `traj` against `gt` plus image and depth scores on the keyframes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    frames: &[Frame],
    traj: &[(f64, Pose)],
    gt: Option<&[(f64, Pose)]>,
    map: &GaussianMap,
    extrinsic: &Pose,
    k: &CameraIntrinsics,
    keyframes: &[usize],
    raster: &RasterConfig,
    sim3: bool,
    source: &Path,
) -> Result<Evaluation, PipelineError> {
    let ate = match gt {
        Some(gt) => Some(ate(traj, gt, sim3).map_err(|e| PipelineError::stage("eval", e))?),
        None => None,
    };
    let poses = poses_for_frames(frames, traj, source)?;
    let scores = keyframes
        .par_iter()
        .map(|&i| score_keyframe(&frames[i], &poses[i], extrinsic, k, map, raster))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::stage("eval", e))?;
    let mean = |f: fn(&KeyframeScore) -> f64| if scores.is_empty() { f64::NAN } else { scores.iter().map(f).sum::<f64>() / scores.len() as f64 };
    Ok(Evaluation { ate, psnr: mean(|s| s.psnr), ssim: mean(|s| s.ssim), depth_l1: mean(|s| s.depth_l1), keyframes: scores })
}

// ---------------------------------------------------------------- run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub frames: usize,
    pub keyframes: Vec<usize>,
    pub matcher: String,
    pub outer_iterations: usize,
    pub extrinsic_converged: bool,
    pub extrinsic_degenerate: bool,
    pub splats: usize,
    pub ate_m: Option<f64>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub depth_l1_mean: f64,
    pub keyframe_scores: Vec<KeyframeScore>,
}

/// Contents of `manifest.txt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub checkpoint_version: u32,
    pub seed: u64,
    pub threads: usize,
    pub results: RunResults,
    pub config: PipelineConfig,
}

impl Manifest {
    pub fn read(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = require(run_dir.join(MANIFEST_FILE))?;
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::stage("eval", format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| PipelineError::stage("eval", format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub extrinsic: Pose,
    pub initial_extrinsic: Pose,
    pub poses: Vec<Pose>,
    pub evaluation: Evaluation,
    pub manifest: Manifest,
}

/// Runs every stage on the configured dataset and writes the run directory.
pub fn cmd_run(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let seq = load_sequence(cfg)?;
    let k = seq.intrinsics;
    info!("loaded {} frames from {}", seq.frames.len(), cfg.dataset.path.display());

    let world = match cfg.matching.matcher {
        MatcherKind::Ncc => None,
        MatcherKind::Auto => dataset_world(&cfg.dataset.path)?,
        MatcherKind::GroundTruth => Some(dataset_world(&cfg.dataset.path)?.ok_or_else(|| {
            PipelineError::Config(format!("ground-truth matching needs a synthetic dataset; {} has no spec file", cfg.dataset.path.display()))
        })?),
    };
    let gt_matcher = world.as_ref().map(|w| w.matcher());
    let ncc = NccMatcher::new(cfg.ncc_config());
    let (matcher, matcher_name): (&dyn Matcher, &str) = match &gt_matcher {
        Some(m) => (m, "ground_truth"),
        None => (&ncc, "ncc"),
    };

    let refine = refine_with_extrinsic_iterations(&seq.frames, &k, matcher, seq.extrinsic, &cfg.refine_config())
        .map_err(|e: RefineError| PipelineError::stage("jointrefine", e))?;
    let (da, dt) = seq.extrinsic.difference(&refine.extrinsic);
    info!("extrinsic moved {:.4} deg, {:.4} m over {} outer iterations", da.to_degrees(), dt, refine.history.len());

    let mut map = GaussianMap::new();
    let mcfg = cfg.mapping_config();
    let report = optimize_map(&mut map, &seq.frames, &refine.poses, &refine.extrinsic, &k, &mcfg)
        .map_err(|e: SplatError| PipelineError::stage("splatmap", e))?;
    info!("map has {} splats (scene scale {:.3} m)", map.len(), report.scene_scale);

    let out = &cfg.output.dir;
    std::fs::create_dir_all(out).map_err(|e| output_err(format!("{}: {e}", out.display())))?;
    let traj: Vec<(f64, Pose)> = seq.frames.iter().map(|f| f.timestamp).zip(refine.poses.iter().copied()).collect();
    write_trajectory(&out.join(TRAJECTORY_FILE), &traj).map_err(output_err)?;
    let calib = Calibration { intrinsics: k, extrinsic: refine.extrinsic };
    write_atomic(&out.join(EXTRINSIC_FILE), encode_calibration(&calib).as_bytes()).map_err(output_err)?;
    let history = format!("# iteration tx ty tz qx qy qz qw delta_deg delta_m\n{}", format_history(&refine.history));
    write_atomic(&out.join(HISTORY_FILE), history.as_bytes()).map_err(output_err)?;
    write_map(&out.join(MAP_FILE), &map).map_err(output_err)?;

    // Score from the artifacts as written so that `eval` reproduces the numbers.
    let traj = read_trajectory(&out.join(TRAJECTORY_FILE)).map_err(output_err)?;
    let map = read_map(&out.join(MAP_FILE)).map_err(output_err)?;
    let te = read_calibration(&out.join(EXTRINSIC_FILE)).map_err(output_err)?.extrinsic;
    let keyframes = keyframe_ids(seq.frames.len(), cfg.mapping.keyframe_stride);
    let raster = cfg.raster_config();
    let evaluation = evaluate(&seq.frames, &traj, seq.groundtruth.as_deref(), &map, &te, &k, &keyframes, &raster, false, &out.join(TRAJECTORY_FILE))?;
    let poses = poses_for_frames(&seq.frames, &traj, &out.join(TRAJECTORY_FILE))?;
    write_keyframe_renders(out, &map, &keyframes, &seq.frames, &poses, &k, &raster, cfg.output.depth_png_scale)?;
    let scene = scene_name(&cfg.dataset.path);
    let row = evaluation.row(&scene);
    write_atomic(&out.join(METRICS_FILE), encode_metrics_csv(std::slice::from_ref(&row)).as_bytes()).map_err(output_err)?;
    write_atomic(&out.join(REPORT_FILE), format_evaluation(&row, &evaluation).as_bytes()).map_err(output_err)?;

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_version: crate::splatmap::CHECKPOINT_VERSION,
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        results: RunResults {
            frames: seq.frames.len(),
            keyframes: keyframes.clone(),
            matcher: matcher_name.to_string(),
            outer_iterations: refine.history.len(),
            extrinsic_converged: refine.converged,
            extrinsic_degenerate: refine.extrinsic_degenerate(),
            splats: map.len(),
            ate_m: evaluation.ate.as_ref().map(|a| a.rmse),
            psnr_mean: evaluation.psnr,
            ssim_mean: evaluation.ssim,
            depth_l1_mean: evaluation.depth_l1,
            keyframe_scores: evaluation.keyframes.clone(),
        },
        config: cfg.clone(),
    };
    let text = toml::to_string(&manifest).map_err(output_err)?;
    write_atomic(&out.join(MANIFEST_FILE), text.as_bytes()).map_err(output_err)?;
    Ok(RunSummary { out_dir: out.clone(), extrinsic: te, initial_extrinsic: seq.extrinsic, poses, evaluation, manifest })
}

#[allow(clippy::too_many_arguments)]
fn write_keyframe_renders(
    out: &Path,
    map: &GaussianMap,
    ids: &[usize],
    frames: &[Frame],
    poses: &[Pose],
    k: &CameraIntrinsics,
    raster: &RasterConfig,
    depth_scale: f64,
) -> Result<(), PipelineError> {
    let named: Vec<(usize, Pose)> = ids.iter().map(|&i| (frames[i].index, poses[i])).collect();
    render_poses(map, &named, k, raster, &out.join("renders"), depth_scale)
}

/// Renders `(name, pose)` pairs into `dir/color` and `dir/depth`.
pub fn render_poses(
    map: &GaussianMap,
    poses: &[(usize, Pose)],
    k: &CameraIntrinsics,
    raster: &RasterConfig,
    dir: &Path,
    depth_scale: f64,
) -> Result<(), PipelineError> {
    for sub in ["color", "depth"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| output_err(format!("{}: {e}", dir.display())))?;
    }
    poses.par_iter().try_for_each(|(name, pose)| {
        let b = render(map.gaussians(), pose, k, raster);
        let stem = frame_file_stem(*name);
        write_color_png(&dir.join("color").join(format!("{stem}.png")), &b.color)?;
        write_depth_png(&dir.join("depth").join(format!("{stem}.png")), b.width, b.height, &b.depth, depth_scale)
    })
    .map_err(|e: IngestError| output_err(e))
}

// ---------------------------------------------------------------- eval

/// Scores an existing run against a ground-truth trajectory and writes
/// `eval_metrics.csv` and `eval_report.txt` into the run directory. `sim3`
/// also fits a scale when aligning.
pub fn cmd_eval(run_dir: &Path, gt_path: &Path, sim3: bool) -> Result<(MetricsRow, Evaluation), PipelineError> {
    let manifest = Manifest::read(run_dir)?;
    let traj_path = require(run_dir.join(TRAJECTORY_FILE))?;
    let map_path = require(run_dir.join(MAP_FILE))?;
    let te_path = require(run_dir.join(EXTRINSIC_FILE))?;
    let gt_path = require(gt_path.to_path_buf())?;
    let cfg = &manifest.config;
    let seq = load_sequence(cfg)?;
    let eval_err = |e: IngestError| PipelineError::stage("eval", e);
    let traj = read_trajectory(&traj_path).map_err(eval_err)?;
    let gt = read_trajectory(&gt_path).map_err(eval_err)?;
    let te = read_calibration(&te_path).map_err(eval_err)?.extrinsic;
    let map = read_map(&map_path).map_err(|e| PipelineError::stage("eval", e))?;
    let keyframes = keyframe_ids(seq.frames.len(), cfg.mapping.keyframe_stride);
    let evaluation = evaluate(&seq.frames, &traj, Some(&gt), &map, &te, &seq.intrinsics, &keyframes, &cfg.raster_config(), sim3, &traj_path)?;
    let row = evaluation.row(&scene_name(&cfg.dataset.path));
    write_atomic(&run_dir.join(EVAL_FILE), encode_metrics_csv(std::slice::from_ref(&row)).as_bytes()).map_err(output_err)?;
    write_atomic(&run_dir.join(EVAL_REPORT_FILE), format_evaluation(&row, &evaluation).as_bytes()).map_err(output_err)?;
    Ok((row, evaluation))
}

/// `key: value` report of the aggregates, also printed by the CLI.
pub fn format_evaluation(row: &MetricsRow, e: &Evaluation) -> String {
    let mut entries = vec![("scene", row.scene.clone())];
    if let Some(a) = &e.ate {
        entries.push(("ate_rmse_m", fmt_f64(a.rmse)));
        entries.push(("ate_mean_m", fmt_f64(a.mean)));
        entries.push(("ate_max_m", fmt_f64(a.max)));
    }
    entries.push(("keyframes", e.keyframes.len().to_string()));
    entries.push(("psnr_db", fmt_f64(e.psnr)));
    entries.push(("ssim", fmt_f64(e.ssim)));
    entries.push(("depth_l1_m", fmt_f64(e.depth_l1)));
    for k in &e.keyframes {
        entries.push(("keyframe", format!("{} psnr {} ssim {} depth_l1 {}", k.frame, fmt_f64(k.psnr), fmt_f64(k.ssim), fmt_f64(k.depth_l1))));
    }
    encode_report(&entries)
}

// ---------------------------------------------------------------- overlay

#[derive(Debug, Clone, PartialEq)]
pub enum ExtrinsicSource {
    /// The dataset calibration.
    Initial,
    /// `extrinsic.txt` of the run in `output.dir`.
    Optimized,
    /// Any calibration file.
    File(PathBuf),
}

impl std::str::FromStr for ExtrinsicSource {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "initial" => ExtrinsicSource::Initial,
            "optimized" => ExtrinsicSource::Optimized,
            path => ExtrinsicSource::File(PathBuf::from(path)),
        })
    }
}

/// A LiDAR point projected into the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub index: usize,
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Projects every cloud point that lands inside the image.
pub fn project_cloud(cloud: &PointCloud, extrinsic: &Pose, k: &CameraIntrinsics) -> Vec<ProjectedPoint> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let y = extrinsic.transform_point(p);
            if y.z <= crate::splatmap::NEAR_CLIP {
                return None;
            }
            let (px, _) = k.project(&y).ok()?;
            k.contains(&px).then_some(ProjectedPoint { index, pixel: px, depth: y.z })
        })
        .collect()
}

fn depth_color(t: f64) -> [f64; 3] {
    // Near points red, far points blue.
    let t = t.clamp(0.0, 1.0);
    [(1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0), (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0), (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0)]
}

/// Draws depth-colored dots over a copy of `image`.
pub fn draw_overlay(image: &ColorImage, points: &[ProjectedPoint]) -> ColorImage {
    let mut out = image.clone();
    if points.is_empty() {
        return out;
    }
    let mut depths: Vec<f64> = points.iter().map(|p| p.depth).collect();
    depths.sort_by(f64::total_cmp);
    let lo = depths[depths.len() / 20];
    let hi = depths[depths.len() - 1 - depths.len() / 20];
    let span = (hi - lo).max(1e-9);
    for p in points {
        let (u, v) = (p.pixel.x.round(), p.pixel.y.round());
        if u < 0.0 || v < 0.0 || u >= image.width as f64 || v >= image.height as f64 {
            continue;
        }
        out.set(u as usize, v as usize, depth_color((p.depth - lo) / span));
    }
    out
}

fn extrinsic_from(source: &ExtrinsicSource, cfg: &PipelineConfig, seq: &Sequence) -> Result<Pose, PipelineError> {
    let from_file = |path: PathBuf| -> Result<Pose, PipelineError> {
        let path = require(path)?;
        Ok(read_calibration(&path).map_err(|e| PipelineError::stage("overlay", e))?.extrinsic)
    };
    match source {
        ExtrinsicSource::Initial => Ok(seq.extrinsic),
        ExtrinsicSource::Optimized => from_file(cfg.output.dir.join(EXTRINSIC_FILE)),
        ExtrinsicSource::File(p) => from_file(p.clone()),
    }
}

/// Overlay of frame `index` with the chosen extrinsic, written to
/// `output.dir/overlay_NNNNNN.png`.
pub fn cmd_overlay(cfg: &PipelineConfig, index: usize, source: &ExtrinsicSource) -> Result<(PathBuf, ColorImage), PipelineError> {
    let seq = load_sequence(cfg)?;
    let frame = seq.frames.get(index).ok_or(PipelineError::FrameOutOfRange { index, len: seq.frames.len() })?;
    let te = extrinsic_from(source, cfg, &seq)?;
    let img = draw_overlay(&frame.image, &project_cloud(&frame.cloud, &te, &seq.intrinsics));
    std::fs::create_dir_all(&cfg.output.dir).map_err(output_err)?;
    let path = cfg.output.dir.join(format!("overlay_{}.png", frame_file_stem(index)));
    write_color_png(&path, &img).map_err(output_err)?;
    Ok((path, img))
}

// ---------------------------------------------------------------- render

/// Renders a checkpoint from every pose of a TUM-format trajectory.
pub fn cmd_render(
    map_path: &Path,
    poses_path: &Path,
    calib_path: &Path,
    out_dir: &Path,
    raster: &RasterConfig,
    depth_scale: f64,
) -> Result<usize, PipelineError> {
    let map = read_map(&require(map_path.to_path_buf())?).map_err(|e| PipelineError::stage("render", e))?;
    let traj = read_trajectory(&require(poses_path.to_path_buf())?).map_err(|e| PipelineError::stage("render", e))?;
    let k = read_calibration(&require(calib_path.to_path_buf())?).map_err(|e| PipelineError::stage("render", e))?.intrinsics;
    let named: Vec<(usize, Pose)> = traj.iter().enumerate().map(|(i, (_, p))| (i, *p)).collect();
    render_poses(&map, &named, &k, raster, out_dir, depth_scale)?;
    Ok(named.len())
}

// ---------------------------------------------------------------- synth

/// Generates a synthetic dataset from a spec file (or the default spec).
pub fn cmd_synth(spec_path: Option<&Path>, seed: u64, out_dir: &Path) -> Result<SyntheticWorld, PipelineError> {
    let spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            SynthSpec::from_toml(&text)?
        }
        None => SynthSpec::default(),
    };
    let (world, frames) = generate(&spec, seed)?;
    std::fs::create_dir_all(out_dir).map_err(output_err)?;
    write_world(out_dir, &world, &frames)?;
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::SynthSpec;
    use nalgebra::Vector3;

    fn tiny_spec() -> SynthSpec {
        SynthSpec { frames: 3, gaussians: 400, width: 48, height: 36, focal: 40.0, min_visible: 10, ..SynthSpec::default() }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 1);
        assert_eq!(PipelineError::stage("ingest", "x").exit_code(), 2);
        assert_eq!(PipelineError::MissingArtifacts("a".into()).exit_code(), 2);
        assert_eq!(PipelineError::from(SynthError::SpecInvalid("f".into())).exit_code(), 1);
    }

    #[test]
    fn keyframes_every_stride() {
        assert_eq!(keyframe_ids(11, 5), vec![0, 5, 10]);
        assert_eq!(keyframe_ids(1, 5), vec![0]);
    }

    #[test]
    fn extrinsic_source_parsing() {
        assert_eq!("initial".parse::<ExtrinsicSource>().unwrap(), ExtrinsicSource::Initial);
        assert_eq!("optimized".parse::<ExtrinsicSource>().unwrap(), ExtrinsicSource::Optimized);
        assert_eq!("a/b.txt".parse::<ExtrinsicSource>().unwrap(), ExtrinsicSource::File("a/b.txt".into()));
    }

    #[test]
    fn overlay_of_empty_cloud_is_the_image() {
        let img = ColorImage::from_fn(8, 6, |u, v| [u as f64 / 8.0, v as f64 / 6.0, 0.5]);
        assert_eq!(draw_overlay(&img, &[]).data, img.data);
    }

    #[test]
    fn overlay_with_identity_extrinsic_hits_true_projections() {
        let spec = SynthSpec { identity_extrinsic: true, ..tiny_spec() };
        let (world, frames) = generate(&spec, 1).unwrap();
        let proj = project_cloud(&frames[0].cloud, &Pose::identity(), &world.intrinsics);
        assert!(!proj.is_empty());
        let mean: f64 = proj
            .iter()
            .map(|p| {
                let truth = world.intrinsics.project(&world.gt_trajectory[0].transform_point(&world.points[world.lidar_visible[0][p.index]])).unwrap().0;
                (p.pixel - truth).norm()
            })
            .sum::<f64>()
            / proj.len() as f64;
        assert!(mean < 1.0, "{mean}");
        let drawn = draw_overlay(&frames[0].image, &proj);
        assert_ne!(drawn.data, frames[0].image.data);
    }

    #[test]
    fn overlay_offset_grows_with_perturbation() {
        let (world, frames) = generate(&tiny_spec(), 2).unwrap();
        let k = world.intrinsics;
        let truth = project_cloud(&frames[0].cloud, &world.gt_extrinsic, &k);
        let mut last = 0.0;
        for deg in [0.5f64, 1.0, 2.0] {
            let bump = Pose::from_axis_angle(Vector3::new(0.2, 1.0, -0.1), deg.to_radians(), Vector3::zeros());
            let te = bump.compose(&world.gt_extrinsic);
            let moved: std::collections::HashMap<usize, Vector2<f64>> = project_cloud(&frames[0].cloud, &te, &k).into_iter().map(|p| (p.index, p.pixel)).collect();
            let offsets: Vec<f64> = truth.iter().filter_map(|p| moved.get(&p.index).map(|q| (q - p.pixel).norm())).collect();
            let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
            assert!(mean > last, "{deg} deg: {mean} <= {last}");
            last = mean;
        }
    }

    #[test]
    fn synth_is_reproducible_and_rejects_zero_frames() {
        let dir = tempfile::tempdir().unwrap();
        let spec_path = dir.path().join("spec.toml");
        std::fs::write(&spec_path, tiny_spec().to_toml()).unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        cmd_synth(Some(&spec_path), 5, &a).unwrap();
        cmd_synth(Some(&spec_path), 5, &b).unwrap();
        for entry in walk(&a) {
            let rel = entry.strip_prefix(&a).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{}", rel.display());
        }
        std::fs::write(&spec_path, "frames = 0\n").unwrap();
        let err = cmd_synth(Some(&spec_path), 5, &dir.path().join("c")).unwrap_err();
        assert!(matches!(err, PipelineError::Config(ref m) if m.contains("frames")), "{err}");
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn eval_requires_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_eval(dir.path(), &dir.path().join("gt.txt"), false), Err(PipelineError::MissingArtifacts(_))));
    }

    #[test]
    fn overlay_frame_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        cmd_synth(None, 0, &data).unwrap_or_else(|_| panic!("synth"));
        let mut cfg = PipelineConfig::default();
        cfg.dataset.path = data;
        cfg.output.dir = dir.path().join("out");
        let err = cmd_overlay(&cfg, 99, &ExtrinsicSource::Initial).unwrap_err();
        assert!(matches!(err, PipelineError::FrameOutOfRange { index: 99, len: 20 }));
        let (path, _) = cmd_overlay(&cfg, 3, &ExtrinsicSource::Initial).unwrap();
        assert!(path.exists());
        assert!(matches!(cmd_overlay(&cfg, 3, &ExtrinsicSource::Optimized), Err(PipelineError::MissingArtifacts(_))));
    }
}
