//! Relative motion between two frames from 3D-3D correspondences:
//! closed-form SVD alignment inside a seeded RANSAC loop.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelMotionError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("point sets do not match in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("degenerate configuration: cross-covariance rank < 2")]
    DegenerateConfiguration,
    #[error("only {found} inliers, need {needed}")]
    InsufficientInliers { found: usize, needed: usize },
}

/// Rigid motion between frames `i` and `j`; `transform` maps camera-j
/// coordinates into camera-i coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeMotionEdge {
    pub i: usize,
    pub j: usize,
    pub transform: Pose,
    pub inlier_count: usize,
    pub inlier_rms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 1000, inlier_threshold: 0.05, min_inliers: 12, seed: 0 }
    }
}

/// Least-squares rigid transform `T` minimizing `sum |T p_k - q_k|^2`.
pub fn rigid_align_svd(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Result<Pose, RelMotionError> {
    if p.len() != q.len() {
        return Err(RelMotionError::LengthMismatch(p.len(), q.len()));
    }
    if p.len() < 3 {
        return Err(RelMotionError::TooFewCorrespondences { needed: 3, got: p.len() });
    }
    let n = p.len() as f64;
    let cp = p.iter().sum::<Vector3<f64>>() / n;
    let cq = q.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (a - cp) * (b - cq).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let smax = sv.max();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if smax <= 0.0 || sorted[1] <= 1e-12 * smax {
        return Err(RelMotionError::DegenerateConfiguration);
    }
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    // Flip the axis of the smallest singular value when the best orthogonal fit is a reflection.
    let imin = sv.imin();
    let mut s = Matrix3::identity();
    s[(imin, imin)] = d;
    let r = v * s * u.transpose();
    Ok(Pose::new(r, cq - r * cp))
}

fn residuals<'a>(t: &Pose, matches: &'a [(Vector3<f64>, Vector3<f64>)]) -> impl Iterator<Item = f64> + 'a {
    let t = *t;
    matches.iter().map(move |(p, q)| (t.transform_point(p) - q).norm())
}

fn classify(t: &Pose, matches: &[(Vector3<f64>, Vector3<f64>)], thresh: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut ss = 0.0;
    for (k, r) in residuals(t, matches).enumerate() {
        if r < thresh {
            idx.push(k);
            ss += r * r;
        }
    }
    let rms = if idx.is_empty() { f64::INFINITY } else { (ss / idx.len() as f64).sqrt() };
    (idx, rms)
}

fn fit_subset(matches: &[(Vector3<f64>, Vector3<f64>)], idx: &[usize]) -> Result<Pose, RelMotionError> {
    let p: Vec<_> = idx.iter().map(|&k| matches[k].0).collect();
    let q: Vec<_> = idx.iter().map(|&k| matches[k].1).collect();
    rigid_align_svd(&p, &q)
}

/// Result of [`ransac_rigid`]: the refined transform and its inlier set.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: Pose,
    pub inliers: Vec<usize>,
    pub inlier_rms: f64,
}

/// RANSAC over minimal 3-point samples. Matches are `(p, q)` with `q ~ T p`.
/// The best hypothesis (most inliers, then lowest inlier RMS, then earliest) is
/// refit on its inliers until the inlier set stops changing.
pub fn ransac_rigid(
    matches: &[(Vector3<f64>, Vector3<f64>)],
    cfg: &RansacConfig,
) -> Result<RansacResult, RelMotionError> {
    if matches.len() < 3 {
        return Err(RelMotionError::TooFewCorrespondences { needed: 3, got: matches.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, Pose)> = None;
    for _ in 0..cfg.iterations.max(1) {
        let s = sample(&mut rng, matches.len(), 3);
        let idx = [s.index(0), s.index(1), s.index(2)];
        let Ok(model) = fit_subset(matches, &idx) else { continue };
        let (inl, rms) = classify(&model, matches, cfg.inlier_threshold);
        let better = match &best {
            None => true,
            Some((n, r, _)) => inl.len() > *n || (inl.len() == *n && rms < *r),
        };
        if better {
            best = Some((inl.len(), rms, model));
        }
    }
    let (_, _, mut model) = best.ok_or(RelMotionError::DegenerateConfiguration)?;
    let (mut inliers, mut rms) = classify(&model, matches, cfg.inlier_threshold);
    for _ in 0..20 {
        if inliers.len() < 3 {
            break;
        }
        let refit = fit_subset(matches, &inliers)?;
        let (next, next_rms) = classify(&refit, matches, cfg.inlier_threshold);
        let stable = next == inliers;
        model = refit;
        inliers = next;
        rms = next_rms;
        if stable {
            break;
        }
    }
    if inliers.len() < cfg.min_inliers.max(3) {
        return Err(RelMotionError::InsufficientInliers { found: inliers.len(), needed: cfg.min_inliers });
    }
    Ok(RansacResult { transform: model, inliers, inlier_rms: rms })
}

/// Builds the edge for frames `(i, j)` from matches `(x_j, x_i)` expressed in
/// the respective camera frames.
pub fn estimate_edge(
    i: usize,
    j: usize,
    matches: &[(Vector3<f64>, Vector3<f64>)],
    cfg: &RansacConfig,
) -> Result<RelativeMotionEdge, RelMotionError> {
    let r = ransac_rigid(matches, cfg)?;
    Ok(RelativeMotionEdge { i, j, transform: r.transform, inlier_count: r.inliers.len(), inlier_rms: r.inlier_rms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_points(rng: &mut impl Rng, n: usize, half: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)))
            .collect()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        Pose::from_axis_angle(axis, rng.random_range(0.0..3.0), t)
    }

    fn pose_err(a: &Pose, b: &Pose) -> f64 {
        (a.rotation - b.rotation).abs().max().max((a.translation - b.translation).abs().max())
    }

    #[test]
    fn identical_sets_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(&mut rng, 20, 1.0);
        let t = rigid_align_svd(&p, &p).unwrap();
        assert!(pose_err(&t, &Pose::identity()) < 1e-12);
    }

    #[test]
    fn recovers_exact_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = random_points(&mut rng, 100, 2.0);
            let t = random_pose(&mut rng);
            let q: Vec<_> = p.iter().map(|x| t.transform_point(x)).collect();
            let est = rigid_align_svd(&p, &q).unwrap();
            assert!(pose_err(&est, &t) < 1e-9);
            assert!((est.rotation.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let p: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        assert_eq!(rigid_align_svd(&p, &p), Err(RelMotionError::DegenerateConfiguration));
    }

    /// Residual of the best rigid fit with a given rotation (translation is closed form).
    fn residual_for_rotation(r: &Matrix3<f64>, p: &[Vector3<f64>], q: &[Vector3<f64>]) -> f64 {
        let n = p.len() as f64;
        let cp = p.iter().sum::<Vector3<f64>>() / n;
        let cq = q.iter().sum::<Vector3<f64>>() / n;
        p.iter().zip(q).map(|(a, b)| (r * (a - cp) - (b - cq)).norm_squared()).sum()
    }

    #[test]
    fn reflection_input_still_yields_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<_> = random_points(&mut rng, 30, 1.0)
            .into_iter()
            .map(|x| Vector3::new(2.0 * x.x, x.y, 0.5 * x.z))
            .collect();
        // Mirror through the z = 0 plane.
        let q: Vec<_> = p.iter().map(|x| Vector3::new(x.x, x.y, -x.z)).collect();
        let t = rigid_align_svd(&p, &q).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-12);
        let svd_res = residual_for_rotation(&t.rotation, &p, &q);

        // Brute-force oracle: axis-angle grid over SO(3), then local random refinement.
        let mut best = f64::INFINITY;
        let mut best_r = Matrix3::identity();
        let steps = 24;
        for a in 0..steps {
            for b in 0..steps {
                for c in 0..steps {
                    let w = Vector3::new(a as f64, b as f64, c as f64) / (steps - 1) as f64 * 2.0 * std::f64::consts::PI
                        - Vector3::repeat(std::f64::consts::PI);
                    if w.norm() > std::f64::consts::PI {
                        continue;
                    }
                    let r = crate::geom::exp_so3(&w);
                    let res = residual_for_rotation(&r, &p, &q);
                    if res < best {
                        best = res;
                        best_r = r;
                    }
                }
            }
        }
        let mut scale = 0.2;
        for _ in 0..4000 {
            let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
            let r = crate::geom::exp_so3(&d) * best_r;
            let res = residual_for_rotation(&r, &p, &q);
            if res < best {
                best = res;
                best_r = r;
            } else {
                scale = (scale * 0.999).max(1e-4);
            }
        }
        assert!(svd_res <= best * 1.02 + 1e-12, "svd {svd_res} vs grid {best}");
        assert!(best <= svd_res * 1.02 + 1e-12, "grid {best} vs svd {svd_res}");
    }

    #[test]
    fn ransac_without_outliers_matches_full_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_points(&mut rng, 50, 2.0);
        let t = random_pose(&mut rng);
        let m: Vec<_> = p.iter().map(|x| (*x, t.transform_point(x))).collect();
        let r = ransac_rigid(&m, &RansacConfig::default()).unwrap();
        assert_eq!(r.inliers.len(), 50);
        let q: Vec<_> = m.iter().map(|x| x.1).collect();
        let full = rigid_align_svd(&p, &q).unwrap();
        assert!(pose_err(&r.transform, &full) < 1e-9);
    }

    #[test]
    fn ransac_rejects_two_matches() {
        let m = vec![(Vector3::zeros(), Vector3::zeros()); 2];
        assert!(matches!(
            ransac_rigid(&m, &RansacConfig::default()),
            Err(RelMotionError::TooFewCorrespondences { .. })
        ));
    }

    fn outlier_problem(seed: u64, n: usize, frac: f64) -> (Vec<(Vector3<f64>, Vector3<f64>)>, Pose) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_pose(&mut rng);
        let m = (0..n)
            .map(|_| {
                let p = random_points(&mut rng, 1, 5.0)[0];
                if rng.random_bool(frac) {
                    (p, random_points(&mut rng, 1, 5.0)[0])
                } else {
                    (p, t.transform_point(&p))
                }
            })
            .collect();
        (m, t)
    }

    #[test]
    fn inlier_set_is_a_fixed_point() {
        let (m, _) = outlier_problem(7, 200, 0.3);
        let cfg = RansacConfig { seed: 7, ..Default::default() };
        let r = ransac_rigid(&m, &cfg).unwrap();
        let (again, _) = classify(&r.transform, &m, cfg.inlier_threshold);
        assert_eq!(again, r.inliers);
    }

    #[test]
    fn swapped_sets_give_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_points(&mut rng, 40, 2.0);
        let t = random_pose(&mut rng);
        let m: Vec<_> = p.iter().map(|x| (*x, t.transform_point(x))).collect();
        let sw: Vec<_> = m.iter().map(|(a, b)| (*b, *a)).collect();
        let a = ransac_rigid(&m, &RansacConfig::default()).unwrap().transform;
        let b = ransac_rigid(&sw, &RansacConfig::default()).unwrap().transform;
        assert!(pose_err(&a.inverse(), &b) < 1e-6);
    }

    #[test]
    fn ransac_is_deterministic_per_seed() {
        let (m, _) = outlier_problem(11, 150, 0.3);
        let cfg = RansacConfig { seed: 3, ..Default::default() };
        assert_eq!(ransac_rigid(&m, &cfg).unwrap(), ransac_rigid(&m, &cfg).unwrap());
    }

    #[test]
    fn insufficient_inliers() {
        let (m, _) = outlier_problem(12, 20, 1.0);
        let cfg = RansacConfig { min_inliers: 12, ..Default::default() };
        assert!(matches!(ransac_rigid(&m, &cfg), Err(RelMotionError::InsufficientInliers { .. })));
    }
}
