//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use ligsm_core::splatmap::{Gaussian, GaussianGrad, GradBuffers, RasterConfig};
use ligsm_core::{CameraIntrinsics, Pose};
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub pose: Pose,
    pub k: CameraIntrinsics,
}

/// Random splats in front of a randomly posed camera; some are saturated,
/// some partly off-screen.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Scene {
    let f = 1.2 * size as f64;
    let c = (size as f64 - 1.0) / 2.0;
    let k = CameraIntrinsics::new(f, 1.05 * f, c, c + 0.3, size, size).unwrap();
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let pose = Pose::from_axis_angle(axis, rng.random_range(-0.3..0.3), Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
    let world_from_cam = pose.inverse();
    let gaussians = (0..n)
        .map(|_| {
            let z: f64 = rng.random_range(1.0..3.0);
            let cam = Vector3::new(rng.random_range(-0.5..0.5) * z, rng.random_range(-0.5..0.5) * z, z);
            let r_px: f64 = rng.random_range(1.0..0.4 * size as f64);
            let opacity = if rng.random_bool(0.15) { 1.0 } else { rng.random_range(0.05..0.95) };
            Gaussian::new(
                world_from_cam.transform_point(&cam),
                Vector3::new(rng.random(), rng.random(), rng.random()),
                opacity,
                r_px * z / k.focal(),
            )
        })
        .collect();
    Scene { gaussians, pose, k }
}

#[derive(Clone, Copy)]
enum Contribution {
    Active,
    Clamped,
}

struct Projected {
    center: Vector2<f64>,
    radius: f64,
    depth: f64,
}

fn project(g: &Gaussian, pose: &Pose, k: &CameraIntrinsics) -> Option<Projected> {
    let y = pose.rotation * g.position + pose.translation;
    if y.z <= 0.01 {
        return None;
    }
    let f = 0.5 * (k.fx + k.fy);
    Some(Projected {
        center: Vector2::new(k.fx * y.x / y.z + k.cx, k.fy * y.y / y.z + k.cy),
        radius: f * g.radius / y.z,
        depth: y.z,
    })
}

fn order(gs: &[Gaussian], pose: &Pose, k: &CameraIntrinsics) -> Vec<(usize, Projected)> {
    let mut v: Vec<(usize, Projected)> = gs.iter().enumerate().filter_map(|(i, g)| project(g, pose, k).map(|p| (i, p))).collect();
    v.sort_by(|(ia, a), (ib, b)| {
        let (pa, pb) = (gs[*ia].position, gs[*ib].position);
        a.depth
            .total_cmp(&b.depth)
            .then(pa.x.total_cmp(&pb.x))
            .then(pa.y.total_cmp(&pb.y))
            .then(pa.z.total_cmp(&pb.z))
            .then(ia.cmp(ib))
    });
    v
}

fn raw_alpha(p: &Projected, o: f64, u: f64, v: f64) -> (f64, f64) {
    let q = (p.center.x - u).powi(2) + (p.center.y - v).powi(2);
    (o * (-q / (2.0 * p.radius * p.radius)).exp(), q)
}

pub struct Buffers {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub silhouette: Vec<f64>,
}

/// Direct per-pixel evaluation over every splat, no tiles.
pub fn brute_force_render(gs: &[Gaussian], pose: &Pose, k: &CameraIntrinsics, bg: [f64; 3]) -> Buffers {
    let sorted = order(gs, pose, k);
    let n = k.width * k.height;
    let mut out = Buffers { color: vec![[0.0; 3]; n], depth: vec![0.0; n], silhouette: vec![0.0; n] };
    for v in 0..k.height {
        for u in 0..k.width {
            let mut alphas = Vec::new();
            for (i, p) in &sorted {
                let (a, q) = raw_alpha(p, gs[*i].opacity, u as f64, v as f64);
                if q.sqrt() > 3.0 * p.radius || a < 1.0 / 255.0 {
                    continue;
                }
                alphas.push((*i, a.min(0.999), p.depth));
            }
            let pix = v * k.width + u;
            let mut c = [0.0; 3];
            let (mut d, mut s) = (0.0, 0.0);
            for (m, &(i, a, depth)) in alphas.iter().enumerate() {
                let t: f64 = alphas[..m].iter().map(|x| 1.0 - x.1).product();
                for ch in 0..3 {
                    c[ch] += gs[i].color[ch] * a * t;
                }
                d += depth * a * t;
                s += a * t;
            }
            let t: f64 = alphas.iter().map(|x| 1.0 - x.1).product();
            for ch in 0..3 {
                c[ch] += bg[ch] * t;
            }
            out.color[pix] = c;
            out.depth[pix] = d;
            out.silhouette[pix] = s;
        }
    }
    out
}

/// Which splats touch each pixel, in blending order, at the base parameters.
pub struct Support(Vec<Vec<(usize, Contribution)>>);

pub fn support(gs: &[Gaussian], pose: &Pose, k: &CameraIntrinsics) -> Support {
    let sorted = order(gs, pose, k);
    let mut out = Vec::with_capacity(k.width * k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            let mut list = Vec::new();
            for (i, p) in &sorted {
                let (a, q) = raw_alpha(p, gs[*i].opacity, u as f64, v as f64);
                if q.sqrt() > 3.0 * p.radius || a < 1.0 / 255.0 {
                    continue;
                }
                list.push((*i, if a > 0.999 { Contribution::Clamped } else { Contribution::Active }));
            }
            out.push(list);
        }
    }
    Support(out)
}

/// `sum(up . buffers)` with the support held fixed, so the function is smooth.
pub fn frozen_objective(gs: &[Gaussian], pose: &Pose, k: &CameraIntrinsics, bg: [f64; 3], sup: &Support, up: &GradBuffers) -> f64 {
    let mut total = 0.0;
    for (pix, list) in sup.0.iter().enumerate() {
        let (u, v) = ((pix % k.width) as f64, (pix / k.width) as f64);
        let mut t = 1.0;
        let mut c = [0.0; 3];
        let (mut d, mut s) = (0.0, 0.0);
        for &(i, kind) in list {
            let p = project(&gs[i], pose, k).unwrap();
            let a = match kind {
                Contribution::Active => raw_alpha(&p, gs[i].opacity, u, v).0,
                Contribution::Clamped => 0.999,
            };
            for ch in 0..3 {
                c[ch] += gs[i].color[ch] * a * t;
            }
            d += p.depth * a * t;
            s += a * t;
            t *= 1.0 - a;
        }
        for ch in 0..3 {
            c[ch] += bg[ch] * t;
            total += up.color[pix][ch] * c[ch];
        }
        total += up.depth[pix] * d + up.silhouette[pix] * s;
    }
    total
}

pub fn random_upstream(rng: &mut ChaCha8Rng, n: usize) -> GradBuffers {
    let mut g = GradBuffers::zeros(n, 1);
    for i in 0..n {
        g.color[i] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        g.depth[i] = rng.random_range(-1.0..1.0);
        g.silhouette[i] = rng.random_range(-1.0..1.0);
    }
    g
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of the
/// frozen-support objective over every splat parameter.
pub fn max_gradient_error(scene: &Scene, cfg: &RasterConfig, up: &GradBuffers, analytic: &[GaussianGrad]) -> f64 {
    let sup = support(&scene.gaussians, &scene.pose, &scene.k);
    let eval = |gs: &[Gaussian]| frozen_objective(gs, &scene.pose, &scene.k, cfg.background, &sup, up);
    let mut worst: f64 = 0.0;
    for (i, g) in scene.gaussians.iter().enumerate() {
        let depth = (scene.pose.rotation * g.position + scene.pose.translation).z;
        for p in 0..8 {
            let h = match p {
                0..=2 => 1e-4 * depth,
                3..=5 => 1e-4,
                6 => 1e-4 * g.opacity.min(1.0 - g.opacity).max(0.01),
                _ => 1e-4 * g.radius,
            };
            let bump = |s: f64| {
                let mut gs = scene.gaussians.clone();
                let x = &mut gs[i];
                match p {
                    0..=2 => x.position[p] += s * h,
                    3..=5 => x.color[p - 3] += s * h,
                    6 => x.opacity += s * h,
                    _ => x.radius += s * h,
                }
                eval(&gs)
            };
            let fd = (bump(1.0) - bump(-1.0)) / (2.0 * h);
            let an = match p {
                0..=2 => analytic[i].position[p],
                3..=5 => analytic[i].color[p - 3],
                6 => analytic[i].opacity,
                _ => analytic[i].radius,
            };
            worst = worst.max(rel_err(an, fd));
        }
    }
    worst
}
