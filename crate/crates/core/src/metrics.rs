//! Trajectory and image quality metrics.

use crate::fsutil::fmt_f64;
use crate::geom::Pose;
use crate::imaging::ColorImage;
use crate::ingest::nearest_timestamp;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub use crate::splatmap::ssim_score;

/// Timestamp tolerance for pairing estimated and reference poses.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("fewer than two poses could be associated by timestamp (found {0})")]
    NoAssociations(usize),
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Rigid part of the map from estimate to reference coordinates.
    pub alignment: Pose,
    pub scale: f64,
    /// Informational only: RMS rotation error in radians after alignment.
    pub rotation_rmse: f64,
    pub pairs: usize,
}

/// Least-squares similarity `(s, R, t)` with `dst ~ s R src + t`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
        var += (s - ms).norm_squared();
    }
    cov /= n;
    var /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * vt;
    let s = if with_scale && var > 0.0 {
        (svd.singular_values[0] + svd.singular_values[1] + sign[(2, 2)] * svd.singular_values[2]) / var
    } else {
        1.0
    };
    (s, r, md - s * r * ms)
}

/// Absolute trajectory error over camera centers after rigid (or, with
/// `with_scale`, similarity) alignment of the estimate to the reference.
pub fn ate(est: &[(f64, Pose)], gt: &[(f64, Pose)], with_scale: bool) -> Result<AteReport, MetricsError> {
    let mut gt_sorted: Vec<&(f64, Pose)> = gt.iter().collect();
    gt_sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let times: Vec<f64> = gt_sorted.iter().map(|p| p.0).collect();
    let pairs: Vec<(Pose, Pose)> = est
        .iter()
        .filter_map(|(t, p)| nearest_timestamp(&times, *t, ASSOCIATION_TOLERANCE).map(|j| (*p, gt_sorted[j].1)))
        .collect();
    if pairs.len() < 2 {
        return Err(MetricsError::NoAssociations(pairs.len()));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|(e, _)| e.center()).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|(_, g)| g.center()).collect();
    let (s, r, t) = umeyama(&src, &dst, with_scale);
    let mut errs: Vec<f64> = src.iter().zip(&dst).map(|(a, b)| (s * r * a + t - b).norm()).collect();
    let n = errs.len() as f64;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean = errs.iter().sum::<f64>() / n;
    let rot_sq: f64 = pairs
        .iter()
        .map(|(e, g)| {
            // Camera-to-world rotations compared in the reference frame.
            let re = r * e.rotation.transpose();
            crate::geom::rotation_angle(&(g.rotation * re)).powi(2)
        })
        .sum();
    errs.sort_by(f64::total_cmp);
    let m = errs.len();
    let median = if m % 2 == 1 { errs[m / 2] } else { 0.5 * (errs[m / 2 - 1] + errs[m / 2]) };
    Ok(AteReport {
        rmse,
        mean,
        median,
        max: errs[m - 1],
        alignment: Pose::new(r, t),
        scale: s,
        rotation_rmse: (rot_sq / n).sqrt(),
        pairs: m,
    })
}

/// Peak signal-to-noise ratio on the [0, 1] range, capped for identical images.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64, MetricsError> {
    if !a.same_shape(b) {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let se: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>()).sum();
    let mse = se / (3 * a.len()) as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scene: String,
    pub ate_cm: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn encode_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("scene,ate_cm,psnr,ssim\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.scene, fmt_f64(r.ate_cm), fmt_f64(r.psnr), fmt_f64(r.ssim)));
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Option<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next()?.trim() != "scene,ate_cm,psnr,ssim" {
        return None;
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return None;
            }
            Some(MetricsRow { scene: f[0].to_string(), ate_cm: f[1].parse().ok()?, psnr: f[2].parse().ok()?, ssim: f[3].parse().ok()? })
        })
        .collect()
}

/// `key: value` lines.
pub fn encode_report(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
}
