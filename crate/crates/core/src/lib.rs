//! LiDAR-assisted camera trajectory and extrinsic estimation with an
//! isotropic Gaussian splat map supervised by color and projected LiDAR depth.

pub mod fsutil;
pub mod geom;
pub mod imaging;
pub mod association;
pub mod ingest;
pub mod jointrefine;
pub mod kdtree;
pub mod metrics;
pub mod posegraph;
pub mod relmotion;
pub mod splatmap;
pub mod synthgen;
pub mod pipeline;

pub use geom::{CameraIntrinsics, Pose, Twist};
