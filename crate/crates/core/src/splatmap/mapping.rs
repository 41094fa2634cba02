use super::raster::{render, render_backward, GaussianGrad, GradBuffers, RasterConfig, NEAR_CLIP};
use super::ssim::ssim;
use super::{Gaussian, GaussianMap, SplatError};
use crate::geom::{CameraIntrinsics, Pose};
use crate::imaging::{ColorImage, DepthMap};
use crate::ingest::{Frame, PointCloud};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct MappingConfig {
    pub raster: RasterConfig,
    pub lambda_color: f64,
    pub lambda_depth: f64,
    pub lambda_ssim: f64,
    pub silhouette_threshold: f64,
    pub keyframe_stride: usize,
    pub iters_per_frame: usize,
    pub lr_position: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_radius: f64,
    /// Length scale for the position and radius steps; derived from the
    /// first frame's median LiDAR depth when unset.
    pub scene_scale: Option<f64>,
    pub prune_opacity: f64,
    pub min_radius: f64,
    pub seed: u64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            raster: RasterConfig::default(),
            lambda_color: 0.5,
            lambda_depth: 1.0,
            lambda_ssim: 0.2,
            silhouette_threshold: 0.99,
            keyframe_stride: 5,
            iters_per_frame: 60,
            lr_position: 1e-4,
            lr_color: 2.5e-3,
            lr_opacity: 5e-2,
            lr_radius: 1e-3,
            scene_scale: None,
            prune_opacity: 0.005,
            min_radius: 1e-4,
            seed: 0,
        }
    }
}

/// A posed view with its supervision targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub frame: usize,
    pub pose: Pose,
    pub image: ColorImage,
    pub depth: DepthMap,
}

impl Keyframe {
    pub fn from_frame(frame: &Frame, pose: Pose, extrinsic: &Pose, k: &CameraIntrinsics) -> Self {
        Self { frame: frame.index, pose, image: frame.image.clone(), depth: project_cloud_depth(&frame.cloud, extrinsic, k) }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub ssim: f64,
    pub depth: f64,
    pub total: f64,
}

/// First and second moments for `[position, color, logit opacity, radius]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdamState {
    pub m: [f64; 8],
    pub v: [f64; 8],
    pub steps: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MappingReport {
    pub added: Vec<usize>,
    pub pruned: Vec<usize>,
    pub final_loss: Vec<f64>,
    pub scene_scale: f64,
}

/// Sparse depth image from a LiDAR cloud; the nearest return wins per pixel.
pub fn project_cloud_depth(cloud: &PointCloud, extrinsic: &Pose, k: &CameraIntrinsics) -> DepthMap {
    let mut d = DepthMap::empty(k.width, k.height);
    for p in &cloud.points {
        let y = extrinsic.transform_point(p);
        if y.z <= NEAR_CLIP {
            continue;
        }
        let Ok((px, z)) = k.project(&y) else { continue };
        if let Some((u, v)) = k.pixel_index(&px) {
            if d.get(u, v).is_none_or(|cur| z < cur) {
                d.set(u, v, z);
            }
        }
    }
    d
}

fn spawn(p: &nalgebra::Vector3<f64>, frame: &Frame, world_from_cam: &Pose, extrinsic: &Pose, k: &CameraIntrinsics) -> Option<(Gaussian, (usize, usize))> {
    let y = extrinsic.transform_point(p);
    if y.z <= NEAR_CLIP {
        return None;
    }
    let (px, d) = k.project(&y).ok()?;
    if !k.contains(&px) {
        return None;
    }
    let c = frame.image.sample_bilinear(px.x, px.y).map(|x| x.clamp(0.0, 1.0));
    let g = Gaussian { position: world_from_cam.transform_point(&y), color: c, opacity: 0.5, radius: d / k.focal() };
    Some((g, k.pixel_index(&px)?))
}

/// One splat per LiDAR return that lands in the image.
pub fn init_from_frame(frame: &Frame, pose: &Pose, extrinsic: &Pose, k: &CameraIntrinsics) -> Result<Vec<Gaussian>, SplatError> {
    let inv = pose.inverse();
    let out: Vec<Gaussian> = frame.cloud.points.iter().filter_map(|p| spawn(p, frame, &inv, extrinsic, k).map(|(g, _)| g)).collect();
    if out.is_empty() {
        return Err(SplatError::EmptyInitialization);
    }
    Ok(out)
}

/// Adds splats for LiDAR returns landing where the map's silhouette is below threshold.
pub fn update_map(
    map: &mut GaussianMap,
    frame: &Frame,
    pose: &Pose,
    extrinsic: &Pose,
    k: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> usize {
    let sil = render(map.gaussians(), pose, k, &cfg.raster).silhouette;
    let inv = pose.inverse();
    let fresh: Vec<Gaussian> = frame
        .cloud
        .points
        .iter()
        .filter_map(|p| spawn(p, frame, &inv, extrinsic, k))
        .filter(|(_, (u, v))| sil[v * k.width + u] < cfg.silhouette_threshold)
        .map(|(g, _)| g)
        .collect();
    let n = fresh.len();
    map.extend(fresh);
    n
}

/// Every `stride`-th frame up to `current`, plus `current` itself.
pub fn keyframe_indices(current: usize, stride: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..=current).step_by(stride.max(1)).collect();
    if ids.last() != Some(&current) {
        ids.push(current);
    }
    ids
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn keyframe_loss(
    gaussians: &[Gaussian],
    kf: &Keyframe,
    k: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> Result<(LossTerms, Vec<GaussianGrad>), SplatError> {
    let out = render(gaussians, &kf.pose, k, &cfg.raster);
    if !out.color.same_shape(&kf.image) {
        return Err(SplatError::DimensionMismatch(out.width, out.height, kf.image.width, kf.image.height));
    }
    let npix = (k.width * k.height) as f64;
    let w_l1 = cfg.lambda_color * (1.0 - cfg.lambda_ssim);
    let w_ssim = cfg.lambda_color * cfg.lambda_ssim;
    let mut up = GradBuffers::zeros(k.width, k.height);
    let mut l1 = 0.0;
    for (i, (r, t)) in out.color.data.iter().zip(&kf.image.data).enumerate() {
        for c in 0..3 {
            let e = r[c] - t[c];
            l1 += e.abs();
            up.color[i][c] = w_l1 * sign(e) / npix;
        }
    }
    l1 /= npix;
    let (s, gs) = ssim(&out.color, &kf.image)?;
    for (dst, g) in up.color.iter_mut().zip(&gs) {
        for c in 0..3 {
            dst[c] -= w_ssim * g[c];
        }
    }
    let masked = kf.depth.valid_count();
    let mut depth = 0.0;
    if masked > 0 {
        for i in 0..out.depth.len() {
            if kf.depth.mask[i] {
                let e = out.depth[i] - kf.depth.values[i];
                depth += e.abs();
                up.depth[i] = cfg.lambda_depth * sign(e) / masked as f64;
            }
        }
        depth /= masked as f64;
    }
    let total = w_l1 * l1 + w_ssim * (1.0 - s) + cfg.lambda_depth * depth;
    let grads = render_backward(gaussians, &kf.pose, k, &cfg.raster, &up);
    Ok((LossTerms { l1, ssim: s, depth, total }, grads))
}

/// Mapping loss averaged over the keyframes, with gradients for every splat.
pub fn mapping_loss(
    gaussians: &[Gaussian],
    keyframes: &[&Keyframe],
    k: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> Result<(LossTerms, Vec<GaussianGrad>), SplatError> {
    let mut terms = LossTerms::default();
    let mut grads = vec![GaussianGrad::default(); gaussians.len()];
    if keyframes.is_empty() {
        return Ok((terms, grads));
    }
    let inv = 1.0 / keyframes.len() as f64;
    for kf in keyframes {
        let (t, g) = keyframe_loss(gaussians, kf, k, cfg)?;
        terms.l1 += t.l1 * inv;
        terms.ssim += t.ssim * inv;
        terms.depth += t.depth * inv;
        terms.total += t.total * inv;
        for (dst, src) in grads.iter_mut().zip(g) {
            dst.position += src.position * inv;
            dst.color += src.color * inv;
            dst.opacity += src.opacity * inv;
            dst.radius += src.radius * inv;
        }
    }
    Ok((terms, grads))
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-15;
const OPACITY_EPS: f64 = 1e-6;

fn adam_step(map: &mut GaussianMap, grads: &[GaussianGrad], lr: &[f64; 8], min_radius: f64) {
    let (gs, states) = map.parts_mut();
    for ((g, st), gr) in gs.iter_mut().zip(states.iter_mut()).zip(grads) {
        if *gr == GaussianGrad::default() {
            continue;
        }
        let o = g.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        let grad = [
            gr.position.x,
            gr.position.y,
            gr.position.z,
            gr.color.x,
            gr.color.y,
            gr.color.z,
            gr.opacity * o * (1.0 - o),
            gr.radius,
        ];
        let mut x = [
            g.position.x,
            g.position.y,
            g.position.z,
            g.color.x,
            g.color.y,
            g.color.z,
            (o / (1.0 - o)).ln(),
            g.radius,
        ];
        st.steps += 1;
        let b1 = 1.0 - BETA1.powi(st.steps as i32);
        let b2 = 1.0 - BETA2.powi(st.steps as i32);
        for i in 0..8 {
            st.m[i] = BETA1 * st.m[i] + (1.0 - BETA1) * grad[i];
            st.v[i] = BETA2 * st.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            x[i] -= lr[i] * (st.m[i] / b1) / ((st.v[i] / b2).sqrt() + EPSILON);
        }
        g.position = Vector3::new(x[0], x[1], x[2]);
        g.color = Vector3::new(x[3], x[4], x[5]).map(|c| c.clamp(0.0, 1.0));
        g.opacity = 1.0 / (1.0 + (-x[6]).exp());
        g.radius = x[7].max(min_radius);
    }
}

fn median_depth(frame: &Frame, extrinsic: &Pose, k: &CameraIntrinsics) -> Option<f64> {
    let mut d: Vec<f64> = frame
        .cloud
        .points
        .iter()
        .map(|p| extrinsic.transform_point(p))
        .filter(|y| y.z > NEAR_CLIP && k.project(y).is_ok_and(|(px, _)| k.contains(&px)))
        .map(|y| y.z)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Incremental mapping: per frame, initialize or extend the map, then take
/// `iters_per_frame` steps over a shuffled keyframe set, then prune.
pub fn optimize_map(
    map: &mut GaussianMap,
    frames: &[Frame],
    poses: &[Pose],
    extrinsic: &Pose,
    k: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> Result<MappingReport, SplatError> {
    let scale = cfg
        .scene_scale
        .or_else(|| frames.first().and_then(|f| median_depth(f, extrinsic, k)))
        .unwrap_or(1.0);
    let lr = [
        cfg.lr_position * scale,
        cfg.lr_position * scale,
        cfg.lr_position * scale,
        cfg.lr_color,
        cfg.lr_color,
        cfg.lr_color,
        cfg.lr_opacity,
        cfg.lr_radius * scale,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stored: BTreeMap<usize, Keyframe> = BTreeMap::new();
    let mut report = MappingReport { scene_scale: scale, ..MappingReport::default() };
    for (idx, (frame, pose)) in frames.iter().zip(poses).enumerate() {
        let added = if map.is_empty() {
            match init_from_frame(frame, pose, extrinsic, k) {
                Ok(gs) => {
                    let n = gs.len();
                    map.extend(gs);
                    n
                }
                Err(e) => {
                    log::warn!("frame {idx}: {e}");
                    0
                }
            }
        } else {
            update_map(map, frame, pose, extrinsic, k, cfg)
        };
        report.added.push(added);
        let current = Keyframe::from_frame(frame, *pose, extrinsic, k);
        let mut order = keyframe_indices(idx, cfg.keyframe_stride);
        order.shuffle(&mut rng);
        let mut last = 0.0;
        for it in 0..cfg.iters_per_frame {
            let id = order[it % order.len()];
            let kf = if id == idx { &current } else { &stored[&id] };
            let (terms, grads) = mapping_loss(map.gaussians(), &[kf], k, cfg)?;
            last = terms.total;
            adam_step(map, &grads, &lr, cfg.min_radius);
        }
        report.final_loss.push(last);
        report.pruned.push(map.retain(|g| g.opacity >= cfg.prune_opacity));
        if idx % cfg.keyframe_stride.max(1) == 0 {
            stored.insert(idx, current);
            map.keyframes.push(idx);
        }
        log::debug!("mapping frame {idx}: {} splats, loss {last:.5}", map.len());
    }
    Ok(report)
}
