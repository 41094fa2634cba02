use super::Gaussian;
use crate::geom::{CameraIntrinsics, Pose};
use crate::imaging::ColorImage;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use std::cmp::Ordering;

pub const NEAR_CLIP: f64 = 0.01;
pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Support of a splat in multiples of its projected radius.
pub const SUPPORT_SIGMAS: f64 = 3.0;
pub const TILE_SIZE: usize = 16;

/// Falloff exponent of the projected splat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Falloff {
    /// `exp(-d^2 / (2 r'^2))`: r' acts as a standard deviation.
    #[default]
    Variance,
    /// `exp(-d^2 / (2 r'))`, kept for comparison.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub background: [f64; 3],
    pub falloff: Falloff,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { background: [0.0; 3], falloff: Falloff::Variance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel coordinates of the projected center.
    pub center: Vector2<f64>,
    /// Projected radius in pixels.
    pub radius: f64,
    pub depth: f64,
    pub source: usize,
    pub camera_point: Vector3<f64>,
}

/// Projects a splat; `None` when it is clipped or its support misses the image.
pub fn project_gaussian(g: &Gaussian, pose: &Pose, k: &CameraIntrinsics) -> Option<ProjectedGaussian> {
    let y = pose.transform_point(&g.position);
    if !(y.z > NEAR_CLIP) {
        return None;
    }
    let center = Vector2::new(k.fx * y.x / y.z + k.cx, k.fy * y.y / y.z + k.cy);
    let radius = k.focal() * g.radius / y.z;
    let nearest = Vector2::new(
        center.x.clamp(0.0, (k.width - 1) as f64),
        center.y.clamp(0.0, (k.height - 1) as f64),
    );
    if (center - nearest).norm() > SUPPORT_SIGMAS * radius {
        return None;
    }
    Some(ProjectedGaussian { center, radius, depth: y.z, source: 0, camera_point: y })
}

#[derive(Debug, Clone, Copy)]
struct Alpha {
    value: f64,
    /// Unscaled falloff, the derivative of alpha with respect to opacity.
    falloff: f64,
    /// Squared pixel distance to the center.
    q: f64,
    clamped: bool,
}

#[inline]
fn eval_alpha(center: &Vector2<f64>, radius: f64, opacity: f64, u: f64, v: f64, mode: Falloff) -> Option<Alpha> {
    let dx = center.x - u;
    let dy = center.y - v;
    let q = dx * dx + dy * dy;
    let reach = SUPPORT_SIGMAS * radius;
    if q > reach * reach {
        return None;
    }
    let e = match mode {
        Falloff::Variance => q / (2.0 * radius * radius),
        Falloff::Literal => q / (2.0 * radius),
    };
    let falloff = (-e).exp();
    let raw = opacity * falloff;
    if raw < ALPHA_MIN {
        return None;
    }
    if raw > ALPHA_MAX {
        return Some(Alpha { value: ALPHA_MAX, falloff, q, clamped: true });
    }
    Some(Alpha { value: raw, falloff, q, clamped: false })
}

/// Blending weight of a projected splat at pixel `y`.
pub fn alpha_at(pg: &ProjectedGaussian, opacity: f64, y: &Vector2<f64>, falloff: Falloff) -> f64 {
    eval_alpha(&pg.center, pg.radius, opacity, y.x, y.y, falloff).map_or(0.0, |a| a.value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub color: ColorImage,
    /// Accumulated (unnormalized) depth in meters.
    pub depth: Vec<f64>,
    pub silhouette: Vec<f64>,
}

impl RenderBuffers {
    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn silhouette_at(&self, u: usize, v: usize) -> f64 {
        self.silhouette[v * self.width + u]
    }
}

/// Upstream gradients of a scalar loss with respect to each render buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffers {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub silhouette: Vec<f64>,
}

impl GradBuffers {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { color: vec![[0.0; 3]; n], depth: vec![0.0; n], silhouette: vec![0.0; n] }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub radius: f64,
}

struct Prepared {
    proj: Vec<ProjectedGaussian>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

/// Canonical front-to-back order: depth, then world position, then index.
fn depth_order(a: &ProjectedGaussian, b: &ProjectedGaussian, gs: &[Gaussian]) -> Ordering {
    let (pa, pb) = (&gs[a.source].position, &gs[b.source].position);
    a.depth
        .total_cmp(&b.depth)
        .then(pa.x.total_cmp(&pb.x))
        .then(pa.y.total_cmp(&pb.y))
        .then(pa.z.total_cmp(&pb.z))
        .then(a.source.cmp(&b.source))
}

fn prepare(gaussians: &[Gaussian], pose: &Pose, k: &CameraIntrinsics) -> Prepared {
    let mut proj: Vec<ProjectedGaussian> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, pose, k).map(|p| ProjectedGaussian { source: i, ..p }))
        .collect();
    proj.sort_by(|a, b| depth_order(a, b, gaussians));
    let tiles_x = k.width.div_ceil(TILE_SIZE);
    let tiles_y = k.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (pi, p) in proj.iter().enumerate() {
        let reach = SUPPORT_SIGMAS * p.radius;
        let u0 = (p.center.x - reach).ceil().max(0.0);
        let v0 = (p.center.y - reach).ceil().max(0.0);
        let u1 = (p.center.x + reach).floor().min((k.width - 1) as f64);
        let v1 = (p.center.y + reach).floor().min((k.height - 1) as f64);
        if u0 > u1 || v0 > v1 {
            continue;
        }
        for ty in (v0 as usize / TILE_SIZE)..=(v1 as usize / TILE_SIZE) {
            for tx in (u0 as usize / TILE_SIZE)..=(u1 as usize / TILE_SIZE) {
                tiles[ty * tiles_x + tx].push(pi as u32);
            }
        }
    }
    Prepared { proj, tiles, tiles_x }
}

fn tile_pixels(t: usize, tiles_x: usize, k: &CameraIntrinsics) -> impl Iterator<Item = (usize, usize)> {
    let u0 = (t % tiles_x) * TILE_SIZE;
    let v0 = (t / tiles_x) * TILE_SIZE;
    let u1 = (u0 + TILE_SIZE).min(k.width);
    let v1 = (v0 + TILE_SIZE).min(k.height);
    (v0..v1).flat_map(move |v| (u0..u1).map(move |u| (u, v)))
}

/// Front-to-back alpha compositing of color, depth and silhouette.
pub fn render(gaussians: &[Gaussian], pose: &Pose, k: &CameraIntrinsics, cfg: &RasterConfig) -> RenderBuffers {
    let prep = prepare(gaussians, pose, k);
    let bg = Vector3::from(cfg.background);
    let tiles: Vec<Vec<(usize, Vector3<f64>, f64, f64)>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &prep.tiles[t];
            tile_pixels(t, prep.tiles_x, k)
                .map(|(u, v)| {
                    let (mut c, mut d, mut s, mut trans) = (Vector3::zeros(), 0.0, 0.0, 1.0);
                    for &pi in list {
                        let p = &prep.proj[pi as usize];
                        let g = &gaussians[p.source];
                        if let Some(a) = eval_alpha(&p.center, p.radius, g.opacity, u as f64, v as f64, cfg.falloff) {
                            let w = a.value * trans;
                            c += g.color * w;
                            d += p.depth * w;
                            s += w;
                            trans *= 1.0 - a.value;
                        }
                    }
                    (v * k.width + u, c + bg * trans, d, s)
                })
                .collect()
        })
        .collect();
    let mut out = RenderBuffers {
        width: k.width,
        height: k.height,
        color: ColorImage::new(k.width, k.height, cfg.background),
        depth: vec![0.0; k.width * k.height],
        silhouette: vec![0.0; k.width * k.height],
    };
    for tile in tiles {
        for (i, c, d, s) in tile {
            out.color.data[i] = [c.x, c.y, c.z];
            out.depth[i] = d;
            out.silhouette[i] = s;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    center: Vector2<f64>,
    radius: f64,
    depth: f64,
    color: Vector3<f64>,
    opacity: f64,
}

impl std::ops::AddAssign for ScreenGrad {
    fn add_assign(&mut self, o: Self) {
        self.center += o.center;
        self.radius += o.radius;
        self.depth += o.depth;
        self.color += o.color;
        self.opacity += o.opacity;
    }
}

/// Exact gradients of `sum(grads . buffers)` with respect to every splat
/// parameter, for a fixed pose. Culled splats receive zero gradients.
pub fn render_backward(
    gaussians: &[Gaussian],
    pose: &Pose,
    k: &CameraIntrinsics,
    cfg: &RasterConfig,
    grads: &GradBuffers,
) -> Vec<GaussianGrad> {
    let prep = prepare(gaussians, pose, k);
    let bg = Vector3::from(cfg.background);
    let per_tile: Vec<Vec<ScreenGrad>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &prep.tiles[t];
            let mut acc = vec![ScreenGrad::default(); list.len()];
            let mut hits: Vec<(usize, Alpha, f64)> = Vec::new();
            for (u, v) in tile_pixels(t, prep.tiles_x, k) {
                let pix = v * k.width + u;
                let gc = Vector3::from(grads.color[pix]);
                let (gd, gs) = (grads.depth[pix], grads.silhouette[pix]);
                if gc == Vector3::zeros() && gd == 0.0 && gs == 0.0 {
                    continue;
                }
                hits.clear();
                let mut trans = 1.0;
                for (li, &pi) in list.iter().enumerate() {
                    let p = &prep.proj[pi as usize];
                    let g = &gaussians[p.source];
                    if let Some(a) = eval_alpha(&p.center, p.radius, g.opacity, u as f64, v as f64, cfg.falloff) {
                        hits.push((li, a, trans));
                        trans *= 1.0 - a.value;
                    }
                }
                // Gradient flowing into everything behind the current splat.
                let mut behind = trans * bg.dot(&gc);
                for &(li, a, ti) in hits.iter().rev() {
                    let p = &prep.proj[list[li] as usize];
                    let g = &gaussians[p.source];
                    let w = g.color.dot(&gc) + p.depth * gd + gs;
                    let d_alpha = ti * w - behind / (1.0 - a.value);
                    behind += w * a.value * ti;
                    let slot = &mut acc[li];
                    slot.color += gc * (a.value * ti);
                    slot.depth += gd * a.value * ti;
                    if !a.clamped {
                        let r = p.radius;
                        let (dq, dr) = match cfg.falloff {
                            Falloff::Variance => (-a.value / (2.0 * r * r), a.value * a.q / (r * r * r)),
                            Falloff::Literal => (-a.value / (2.0 * r), a.value * a.q / (2.0 * r * r)),
                        };
                        slot.opacity += d_alpha * a.falloff;
                        slot.center += (p.center - Vector2::new(u as f64, v as f64)) * (2.0 * dq * d_alpha);
                        slot.radius += dr * d_alpha;
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); prep.proj.len()];
    for (t, acc) in per_tile.into_iter().enumerate() {
        for (li, g) in acc.into_iter().enumerate() {
            screen[prep.tiles[t][li] as usize] += g;
        }
    }
    let f = k.focal();
    let rot_t = pose.rotation.transpose();
    let mut out = vec![GaussianGrad::default(); gaussians.len()];
    for (p, s) in prep.proj.iter().zip(&screen) {
        let y = &p.camera_point;
        let r = gaussians[p.source].radius;
        let mut gy = k.projection_jacobian(y).transpose() * s.center;
        gy.z += s.depth - s.radius * f * r / (y.z * y.z);
        out[p.source] = GaussianGrad {
            position: rot_t * gy,
            color: s.color,
            opacity: s.opacity,
            radius: s.radius * f / y.z,
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 101, 81).unwrap()
    }

    fn splat(x: f64, y: f64, z: f64, color: [f64; 3], o: f64, r: f64) -> Gaussian {
        Gaussian::new(Vector3::new(x, y, z), Vector3::from(color), o, r)
    }

    #[test]
    fn projection_examples() {
        let k = k100();
        let p = project_gaussian(&splat(0.0, 0.0, 2.0, [0.5; 3], 0.5, 0.02), &Pose::identity(), &k).unwrap();
        assert!((p.center - Vector2::new(50.0, 40.0)).norm() < 1e-12);
        assert!((p.radius - 1.0).abs() < 1e-12);
        assert!(project_gaussian(&splat(0.0, 0.0, -2.0, [0.5; 3], 0.5, 0.02), &Pose::identity(), &k).is_none());
        assert!(project_gaussian(&splat(0.0, 0.0, 0.005, [0.5; 3], 0.5, 0.02), &Pose::identity(), &k).is_none());
        let far = project_gaussian(&splat(0.0, 0.0, 4.0, [0.5; 3], 0.5, 0.02), &Pose::identity(), &k).unwrap();
        assert!((far.radius - 0.5 * p.radius).abs() < 1e-12);
        // Support disc entirely left of the image.
        assert!(project_gaussian(&splat(-1.2, 0.0, 2.0, [0.5; 3], 0.5, 0.02), &Pose::identity(), &k).is_none());
        // Center outside but the disc reaches in.
        assert!(project_gaussian(&splat(-1.02, 0.0, 2.0, [0.5; 3], 0.5, 0.02), &Pose::identity(), &k).is_some());
    }

    #[test]
    fn alpha_examples() {
        let pg = ProjectedGaussian {
            center: Vector2::new(10.0, 10.0),
            radius: 2.0,
            depth: 1.0,
            source: 0,
            camera_point: Vector3::z(),
        };
        assert_eq!(alpha_at(&pg, 0.5, &Vector2::new(10.0, 10.0), Falloff::Variance), 0.5);
        let a = alpha_at(&pg, 1.0, &Vector2::new(12.0, 10.0), Falloff::Variance);
        assert!((a - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(alpha_at(&pg, 1.0, &Vector2::new(18.0, 10.0), Falloff::Variance), 0.0);
        assert_eq!(alpha_at(&pg, 1.0, &Vector2::new(10.0, 10.0), Falloff::Variance), ALPHA_MAX);
        assert_eq!(alpha_at(&pg, 0.003, &Vector2::new(10.0, 10.0), Falloff::Variance), 0.0);
        // Printed form: exponent over 2 r'.
        let lit = alpha_at(&pg, 1.0, &Vector2::new(12.0, 10.0), Falloff::Literal);
        assert!((lit - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn empty_map_renders_background() {
        let k = k100();
        let cfg = RasterConfig { background: [0.2, 0.3, 0.4], ..RasterConfig::default() };
        let out = render(&[], &Pose::identity(), &k, &cfg);
        assert!(out.color.data.iter().all(|c| *c == [0.2, 0.3, 0.4]));
        assert!(out.depth.iter().all(|d| *d == 0.0));
        assert!(out.silhouette.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn single_saturated_splat() {
        let k = k100();
        let cfg = RasterConfig { background: [0.1, 0.1, 0.1], ..RasterConfig::default() };
        let g = splat(0.0, 0.0, 2.0, [0.9, 0.5, 0.2], 1.0, 0.04);
        let out = render(&[g], &Pose::identity(), &k, &cfg);
        let c = out.color.get(50, 40);
        for ch in 0..3 {
            assert!((c[ch] - (0.999 * g.color[ch] + 0.001 * 0.1)).abs() < 1e-12);
        }
        assert!((out.silhouette_at(50, 40) - 0.999).abs() < 1e-12);
        assert!((out.depth_at(50, 40) - 0.999 * 2.0).abs() < 1e-12);
        // Far from the splat nothing is drawn.
        assert_eq!(out.silhouette_at(0, 0), 0.0);
        assert_eq!(out.color.get(0, 0), [0.1, 0.1, 0.1]);
    }

    #[test]
    fn two_overlapping_splats_match_hand_compositing() {
        let k = k100();
        let cfg = RasterConfig::default();
        let near = splat(0.0, 0.0, 1.0, [1.0, 0.0, 0.0], 0.6, 0.05);
        let far = splat(0.02, 0.0, 2.0, [0.0, 1.0, 0.0], 0.7, 0.1);
        // Storage order should not matter.
        let out = render(&[far, near], &Pose::identity(), &k, &cfg);
        let y = Vector2::new(51.0, 40.0);
        let p1 = project_gaussian(&near, &Pose::identity(), &k).unwrap();
        let p2 = project_gaussian(&far, &Pose::identity(), &k).unwrap();
        let a1 = near.opacity * (-(p1.center - y).norm_squared() / (2.0 * p1.radius * p1.radius)).exp();
        let a2 = far.opacity * (-(p2.center - y).norm_squared() / (2.0 * p2.radius * p2.radius)).exp();
        let c = out.color.get(51, 40);
        assert!((c[0] - a1).abs() < 1e-6);
        assert!((c[1] - (1.0 - a1) * a2).abs() < 1e-6);
        assert!((out.depth_at(51, 40) - (a1 * 1.0 + (1.0 - a1) * a2 * 2.0)).abs() < 1e-6);
        assert!((out.silhouette_at(51, 40) - (a1 + (1.0 - a1) * a2)).abs() < 1e-6);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let k = k100();
        let gs = [splat(0.0, 0.0, 2.0, [0.3, 0.4, 0.5], 0.5, 0.05), splat(0.1, 0.0, 3.0, [0.3, 0.4, 0.5], 0.5, 0.05)];
        let g = render_backward(&gs, &Pose::identity(), &k, &RasterConfig::default(), &GradBuffers::zeros(101, 81));
        assert!(g.iter().all(|g| *g == GaussianGrad::default()));
    }

    #[test]
    fn color_gradient_of_single_splat_is_alpha_sum() {
        let k = k100();
        let g = splat(0.0, 0.0, 2.0, [0.3, 0.4, 0.5], 0.5, 0.05);
        let mut up = GradBuffers::zeros(101, 81);
        for c in up.color.iter_mut() {
            *c = [1.0, 2.0, 0.0];
        }
        let grads = render_backward(&[g], &Pose::identity(), &k, &RasterConfig::default(), &up);
        let pg = project_gaussian(&g, &Pose::identity(), &k).unwrap();
        let mut sum = 0.0;
        for v in 0..81 {
            for u in 0..101 {
                sum += alpha_at(&pg, g.opacity, &Vector2::new(u as f64, v as f64), Falloff::Variance);
            }
        }
        assert!((grads[0].color - Vector3::new(sum, 2.0 * sum, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn culled_splats_get_zero_gradients() {
        let k = k100();
        let gs = [splat(0.0, 0.0, 2.0, [0.3; 3], 0.5, 0.05), splat(0.0, 0.0, -2.0, [0.3; 3], 0.5, 0.05)];
        let mut up = GradBuffers::zeros(101, 81);
        up.silhouette.iter_mut().for_each(|s| *s = 1.0);
        let g = render_backward(&gs, &Pose::identity(), &k, &RasterConfig::default(), &up);
        assert!(g[0].opacity != 0.0);
        assert_eq!(g[1], GaussianGrad::default());
    }
}
