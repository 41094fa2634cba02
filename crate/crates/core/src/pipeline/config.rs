use super::PipelineError;
use crate::association::{NccMatcherConfig, NormalConfig};
use crate::jointrefine::{HuberConfig, JointSolverConfig, JointWeights, RefineConfig};
use crate::posegraph::{CycleConfig, LmConfig};
use crate::relmotion::RansacConfig;
use crate::splatmap::{Falloff, MappingConfig, RasterConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `calib.txt` selects the generic layout, `rgb.txt` the TUM layout.
    #[default]
    Auto,
    Generic,
    Tum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatcherKind {
    /// Ground truth when the dataset was written by `synth`, NCC otherwise.
    #[default]
    Auto,
    Ncc,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    pub format: DatasetFormat,
    /// Keep every n-th frame.
    pub stride: usize,
    /// 0 keeps all frames.
    pub max_frames: usize,
    /// Depth-image subsampling when building clouds from TUM depth.
    pub tum_pixel_stride: usize,
    pub tum_depth_scale: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data"),
            format: DatasetFormat::Auto,
            stride: 1,
            max_frames: 0,
            tum_pixel_stride: 4,
            tum_depth_scale: crate::ingest::TUM_DEPTH_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingSection {
    pub matcher: MatcherKind,
    /// Each frame is matched with this many predecessors...
    pub window: usize,
    /// ...and with every `loop_stride`-th older frame.
    pub loop_stride: usize,
    /// Pixel radius for lifting a feature to its nearest projected LiDAR point.
    pub lift_radius: f64,
    pub cell_size: usize,
    pub max_per_cell: usize,
    pub patch_radius: usize,
    pub min_ncc: f64,
    pub ratio: f64,
    pub search_radius: f64,
    pub normal_neighbors: usize,
    pub planarity_tol: f64,
}

impl Default for MatchingSection {
    fn default() -> Self {
        let ncc = NccMatcherConfig::default();
        let normals = NormalConfig::default();
        let refine = RefineConfig::default();
        Self {
            matcher: MatcherKind::Auto,
            window: refine.match_window,
            loop_stride: refine.loop_stride,
            lift_radius: refine.lift_radius,
            cell_size: ncc.cell_size,
            max_per_cell: ncc.max_per_cell,
            patch_radius: ncc.patch_radius,
            min_ncc: ncc.min_ncc,
            ratio: ncc.ratio,
            search_radius: ncc.search_radius,
            normal_neighbors: normals.k_neighbors,
            planarity_tol: normals.planarity_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelmotionSection {
    pub ransac_iterations: usize,
    pub inlier_threshold: f64,
    pub min_inliers: usize,
}

impl Default for RelmotionSection {
    fn default() -> Self {
        let r = RansacConfig::default();
        Self { ransac_iterations: r.iterations, inlier_threshold: r.inlier_threshold, min_inliers: r.min_inliers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosegraphSection {
    pub cycle_angle_deg: f64,
    pub cycle_translation: f64,
    pub rate_threshold: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for PosegraphSection {
    fn default() -> Self {
        let c = CycleConfig::default();
        let lm = LmConfig::default();
        Self {
            cycle_angle_deg: c.angle_tol.to_degrees(),
            cycle_translation: c.trans_tol,
            rate_threshold: c.rate_threshold,
            max_iterations: lm.max_iterations,
            relative_tolerance: lm.relative_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointSection {
    pub lambda_c: f64,
    pub lambda_l: f64,
    pub lambda_j: f64,
    pub huber: bool,
    pub huber_pixel: f64,
    pub huber_metric: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub outer_iterations: usize,
    pub angle_tolerance: f64,
    pub translation_tolerance: f64,
    pub lidar_max_dist: f64,
    pub cross_max_dist: f64,
    pub lidar_points_per_pair: usize,
    pub reprojection_tolerance: f64,
    pub degeneracy_ratio: f64,
}

impl Default for JointSection {
    fn default() -> Self {
        let w = JointWeights::default();
        let h = HuberConfig::default();
        let s = JointSolverConfig::default();
        let r = RefineConfig::default();
        Self {
            lambda_c: w.camera,
            lambda_l: w.lidar,
            lambda_j: w.joint,
            huber: true,
            huber_pixel: h.pixel,
            huber_metric: h.metric,
            max_iterations: s.max_iterations,
            relative_tolerance: s.relative_tolerance,
            outer_iterations: r.max_outer_iterations,
            angle_tolerance: r.angle_tolerance,
            translation_tolerance: r.translation_tolerance,
            lidar_max_dist: r.lidar_max_dist,
            cross_max_dist: r.cross_max_dist,
            lidar_points_per_pair: r.lidar_points_per_pair,
            reprojection_tolerance: r.reprojection_tolerance,
            degeneracy_ratio: s.degeneracy_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSection {
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
    /// 0 selects the median first-frame LiDAR depth.
    pub scene_scale: f64,
    pub prune_opacity: f64,
    pub min_radius: f64,
    /// Use the falloff exp(-q / 2r') instead of exp(-q / 2r'^2).
    pub literal_falloff: bool,
    pub background: [f64; 3],
}

impl Default for MappingSection {
    fn default() -> Self {
        let m = MappingConfig::default();
        Self {
            lambda_color: m.lambda_color,
            lambda_depth: m.lambda_depth,
            lambda_ssim: m.lambda_ssim,
            silhouette_threshold: m.silhouette_threshold,
            keyframe_stride: m.keyframe_stride,
            iters_per_frame: m.iters_per_frame,
            lr_position: m.lr_position,
            lr_color: m.lr_color,
            lr_opacity: m.lr_opacity,
            lr_radius: m.lr_radius,
            scene_scale: 0.0,
            prune_opacity: m.prune_opacity,
            min_radius: m.min_radius,
            literal_falloff: false,
            background: m.raster.background,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Depth PNG units per meter.
    pub depth_png_scale: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), depth_png_scale: 5000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Kept for completeness; no stage reads it.
    pub r_s_unused: f64,
    pub dataset: DatasetSection,
    pub matching: MatchingSection,
    pub relmotion: RelmotionSection,
    pub posegraph: PosegraphSection,
    pub joint: JointSection,
    pub mapping: MappingSection,
    pub output: OutputSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            r_s_unused: 0.3,
            dataset: DatasetSection::default(),
            matching: MatchingSection::default(),
            relmotion: RelmotionSection::default(),
            posegraph: PosegraphSection::default(),
            joint: JointSection::default(),
            mapping: MappingSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range checks that do not touch the file system.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let j = &self.joint;
        let m = &self.mapping;
        let weights = [
            ("joint.lambda_c", j.lambda_c),
            ("joint.lambda_l", j.lambda_l),
            ("joint.lambda_j", j.lambda_j),
            ("mapping.lambda_color", m.lambda_color),
            ("mapping.lambda_depth", m.lambda_depth),
            ("mapping.lambda_ssim", m.lambda_ssim),
            ("mapping.lr_position", m.lr_position),
            ("mapping.lr_color", m.lr_color),
            ("mapping.lr_opacity", m.lr_opacity),
            ("mapping.lr_radius", m.lr_radius),
            ("mapping.scene_scale", m.scene_scale),
            ("mapping.prune_opacity", m.prune_opacity),
            ("matching.lift_radius", self.matching.lift_radius),
            ("joint.huber_pixel", j.huber_pixel),
            ("joint.huber_metric", j.huber_metric),
        ];
        for (name, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return bad(format!("{name} must be a non-negative number, got {w}"));
            }
        }
        if m.lambda_ssim > 1.0 {
            return bad(format!("mapping.lambda_ssim must lie in [0, 1], got {}", m.lambda_ssim));
        }
        if !(0.0..=1.0).contains(&m.silhouette_threshold) {
            return bad(format!("mapping.silhouette_threshold must lie in [0, 1], got {}", m.silhouette_threshold));
        }
        if !(m.min_radius > 0.0) {
            return bad("mapping.min_radius must be positive".into());
        }
        if self.dataset.stride == 0 || m.keyframe_stride == 0 || self.matching.window == 0 {
            return bad("dataset.stride, mapping.keyframe_stride and matching.window must be positive".into());
        }
        if !(self.output.depth_png_scale > 0.0) {
            return bad("output.depth_png_scale must be positive".into());
        }
        Ok(())
    }

    /// Checks that the dataset directory exists.
    pub fn check_paths(&self) -> Result<(), PipelineError> {
        if !self.dataset.path.is_dir() {
            return Err(PipelineError::Config(format!("dataset path {} does not exist", self.dataset.path.display())));
        }
        Ok(())
    }

    pub fn refine_config(&self) -> RefineConfig {
        let j = &self.joint;
        let mt = &self.matching;
        let pg = &self.posegraph;
        RefineConfig {
            weights: JointWeights { camera: j.lambda_c, lidar: j.lambda_l, joint: j.lambda_j },
            huber: j.huber.then_some(HuberConfig { pixel: j.huber_pixel, metric: j.huber_metric }),
            solver: JointSolverConfig {
                max_iterations: j.max_iterations,
                relative_tolerance: j.relative_tolerance,
                degeneracy_ratio: j.degeneracy_ratio,
                ..JointSolverConfig::default()
            },
            ransac: RansacConfig {
                iterations: self.relmotion.ransac_iterations,
                inlier_threshold: self.relmotion.inlier_threshold,
                min_inliers: self.relmotion.min_inliers,
                seed: self.seed,
            },
            cycle: CycleConfig {
                angle_tol: pg.cycle_angle_deg.to_radians(),
                trans_tol: pg.cycle_translation,
                rate_threshold: pg.rate_threshold,
            },
            posegraph: LmConfig { max_iterations: pg.max_iterations, relative_tolerance: pg.relative_tolerance, ..LmConfig::default() },
            normals: NormalConfig { k_neighbors: mt.normal_neighbors, planarity_tol: mt.planarity_tol },
            lift_radius: mt.lift_radius,
            match_window: mt.window,
            loop_stride: mt.loop_stride,
            lidar_max_dist: j.lidar_max_dist,
            cross_max_dist: j.cross_max_dist,
            lidar_points_per_pair: j.lidar_points_per_pair,
            reprojection_tolerance: j.reprojection_tolerance,
            max_outer_iterations: j.outer_iterations,
            angle_tolerance: j.angle_tolerance,
            translation_tolerance: j.translation_tolerance,
        }
    }

    pub fn ncc_config(&self) -> NccMatcherConfig {
        let m = &self.matching;
        NccMatcherConfig {
            cell_size: m.cell_size,
            max_per_cell: m.max_per_cell,
            patch_radius: m.patch_radius,
            min_ncc: m.min_ncc,
            ratio: m.ratio,
            search_radius: m.search_radius,
        }
    }

    pub fn raster_config(&self) -> RasterConfig {
        RasterConfig {
            background: self.mapping.background,
            falloff: if self.mapping.literal_falloff { Falloff::Literal } else { Falloff::Variance },
        }
    }

    pub fn mapping_config(&self) -> MappingConfig {
        let m = &self.mapping;
        MappingConfig {
            raster: self.raster_config(),
            lambda_color: m.lambda_color,
            lambda_depth: m.lambda_depth,
            lambda_ssim: m.lambda_ssim,
            silhouette_threshold: m.silhouette_threshold,
            keyframe_stride: m.keyframe_stride,
            iters_per_frame: m.iters_per_frame,
            lr_position: m.lr_position,
            lr_color: m.lr_color,
            lr_opacity: m.lr_opacity,
            lr_radius: m.lr_radius,
            scene_scale: (m.scene_scale > 0.0).then_some(m.scene_scale),
            prune_opacity: m.prune_opacity,
            min_radius: m.min_radius,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_constants() {
        let c = PipelineConfig::default();
        assert_eq!(c.r_s_unused, 0.3);
        assert_eq!((c.joint.lambda_c, c.joint.lambda_l, c.joint.lambda_j), (1.0, 20.0, 10.0));
        assert_eq!((c.mapping.lambda_color, c.mapping.lambda_depth, c.mapping.lambda_ssim), (0.5, 1.0, 0.2));
        assert_eq!(c.mapping.keyframe_stride, 5);
        assert_eq!(c.mapping.silhouette_threshold, 0.99);
        assert_eq!((c.matching.window, c.matching.loop_stride), (5, 10));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = PipelineConfig::from_toml("seed = 4\n[mapping]\niters_per_frame = 7\n").unwrap();
        assert_eq!(p.seed, 4);
        assert_eq!(p.mapping.iters_per_frame, 7);
        assert_eq!(p.mapping.lambda_ssim, 0.2);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(PipelineConfig::from_toml("[joint]\nlambda_l = -1.0\n"), Err(PipelineError::Config(_))));
        assert!(PipelineConfig::from_toml("[mapping]\nlambda_ssim = 1.5\n").is_err());
        assert!(PipelineConfig::from_toml("[joint]\nunknown = 1\n").is_err());
        assert!(PipelineConfig::from_toml("[dataset]\nformat = \"bag\"\n").is_err());
    }

    #[test]
    fn missing_dataset_path_is_a_config_error() {
        let mut c = PipelineConfig::default();
        c.dataset.path = PathBuf::from("/definitely/not/here");
        assert!(matches!(c.check_paths(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let text = include_str!("../../../../configs/default.toml");
        assert_eq!(PipelineConfig::from_toml(text).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn module_configs_follow_sections() {
        let mut c = PipelineConfig::default();
        c.joint.huber = false;
        c.mapping.scene_scale = 2.0;
        c.mapping.literal_falloff = true;
        let r = c.refine_config();
        assert!(r.huber.is_none());
        assert_eq!(r.weights.lidar, 20.0);
        let m = c.mapping_config();
        assert_eq!(m.scene_scale, Some(2.0));
        assert_eq!(m.raster.falloff, Falloff::Literal);
        assert_eq!(PipelineConfig::default().mapping_config().scene_scale, None);
    }
}
