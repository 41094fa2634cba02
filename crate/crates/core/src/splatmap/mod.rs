//! Isotropic Gaussian splat map: rasterization, gradients, SSIM and
//! incremental map building.

mod checkpoint;
mod mapping;
mod raster;
mod ssim;

pub use checkpoint::{decode_map, encode_map, read_map, write_map, CHECKPOINT_VERSION};
pub use mapping::{
    init_from_frame, keyframe_indices, mapping_loss, optimize_map, project_cloud_depth, update_map, AdamState, Keyframe,
    LossTerms, MappingConfig, MappingReport,
};
pub use raster::{
    alpha_at, project_gaussian, render, render_backward, Falloff, GaussianGrad, GradBuffers, ProjectedGaussian,
    RasterConfig, RenderBuffers, ALPHA_MAX, ALPHA_MIN, NEAR_CLIP, SUPPORT_SIGMAS, TILE_SIZE,
};
pub use ssim::{ssim, ssim_score, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("no LiDAR point projects inside the image")]
    EmptyInitialization,
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("map checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    /// World-frame center in meters.
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity: f64,
    /// Isotropic radius in meters.
    pub radius: f64,
}

impl Gaussian {
    pub fn new(position: Vector3<f64>, color: Vector3<f64>, opacity: f64, radius: f64) -> Self {
        Self { position, color, opacity, radius }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.position.iter().all(|x| x.is_finite()) {
            return Err("non-finite position".into());
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(format!("color {:?} outside [0, 1]", self.color.as_slice()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(format!("radius {} must be positive", self.radius));
        }
        Ok(())
    }
}

/// The map plus per-Gaussian optimizer state, kept in lockstep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian>,
    optimizer: Vec<AdamState>,
    pub keyframes: Vec<usize>,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_gaussians(gaussians: Vec<Gaussian>) -> Self {
        let optimizer = vec![AdamState::default(); gaussians.len()];
        Self { gaussians, optimizer, keyframes: Vec::new() }
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn optimizer_state(&self) -> &[AdamState] {
        &self.optimizer
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.gaussians.push(g);
        self.optimizer.push(AdamState::default());
    }

    pub fn extend(&mut self, gs: impl IntoIterator<Item = Gaussian>) {
        for g in gs {
            self.push(g);
        }
    }

    /// Keeps the Gaussians for which `keep` holds; returns how many were removed.
    pub fn retain(&mut self, mut keep: impl FnMut(&Gaussian) -> bool) -> usize {
        let before = self.gaussians.len();
        let mask: Vec<bool> = self.gaussians.iter().map(&mut keep).collect();
        let mut it = mask.iter();
        self.gaussians.retain(|_| *it.next().unwrap());
        let mut it = mask.iter();
        self.optimizer.retain(|_| *it.next().unwrap());
        before - self.gaussians.len()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Gaussian], &mut [AdamState]) {
        (&mut self.gaussians, &mut self.optimizer)
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        for (index, g) in self.gaussians.iter().enumerate() {
            g.validate().map_err(|reason| SplatError::InvalidGaussian { index, reason })?;
        }
        Ok(())
    }
}
