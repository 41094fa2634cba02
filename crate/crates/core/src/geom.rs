//! Rigid-body algebra on SE(3), the pinhole camera and a few small kernels
//! shared by the rest of the crate.
//!
//! Frame conventions used everywhere:
//! - a camera pose `T_i` maps WORLD coordinates into CAMERA-i coordinates;
//! - a relative motion `T_ij = T_i * T_j^-1` maps camera-j into camera-i;
//! - the extrinsic `T_e` maps LIDAR coordinates into CAMERA coordinates.
//!
//! Increments on poses are applied on the left: `T <- exp(delta) * T`, with the
//! twist ordered as (rotation, translation).

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Rotation angles above this cannot be logged reliably.
pub const MAX_LOG_ANGLE: f64 = std::f64::consts::PI - 1e-6;

const SERIES_ANGLE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("rotation angle {angle} rad is too close to pi to take the logarithm")]
    AngleNearPi { angle: f64 },
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Cross-product matrix: `skew(a) * b == a.cross(b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation angle of a rotation matrix in [0, pi].
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    s.norm().atan2(c)
}

/// Element of se(3), rotational part first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into_owned(), v.fixed_rows::<3>(3).into_owned())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation about `axis` (need not be normalized) by `angle` radians, then translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = if axis.norm() == 0.0 {
            Matrix3::identity()
        } else {
            exp_so3(&(axis.normalize() * angle))
        };
        Self::new(rot, translation)
    }

    /// Builds a pose from a unit quaternion given as (qx, qy, qz, qw).
    pub fn from_quaternion(translation: Vector3<f64>, q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
        Self::new(uq.to_rotation_matrix().into_inner(), translation)
    }

    /// Rotation as (qx, qy, qz, qw) with qw >= 0.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        [sign * q.i, sign * q.j, sign * q.k, sign * q.w]
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Camera center in world coordinates when `self` is a world-to-camera pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// `exp(delta) * self`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        exp_se3(&Twist::from_vector(delta)).compose(self)
    }

    /// Rotation angle and translation norm of `self^-1 * other`.
    pub fn difference(&self, other: &Pose) -> (f64, f64) {
        let d = self.inverse().compose(other);
        (d.rotation_angle(), d.translation.norm())
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> Pose {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-15, 20, Rotation3::identity());
        Pose::new(rot.into_inner(), self.translation)
    }
}

fn so3_coefficients(theta: f64) -> (f64, f64, f64) {
    // (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let s = theta.sin();
        let h = (0.5 * theta).sin();
        (s / theta, 2.0 * h * h / (theta * theta), (theta - s) / (theta * theta * theta))
    }
}

pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let (a, b, _) = so3_coefficients(theta);
    let k = skew(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3).
pub fn left_jacobian_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let (_, b, c) = so3_coefficients(theta);
    let k = skew(w);
    Matrix3::identity() + k * b + k * k * c
}

pub fn exp_se3(t: &Twist) -> Pose {
    let rot = exp_so3(&t.rotation);
    let v = left_jacobian_so3(&t.rotation);
    Pose::new(rot, v * t.translation)
}

/// Logarithm of SO(3); fails when the angle exceeds [`MAX_LOG_ANGLE`].
pub fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeomError> {
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.norm().atan2(c);
    if theta > MAX_LOG_ANGLE {
        return Err(GeomError::AngleNearPi { angle: theta });
    }
    let scale = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0
    } else {
        theta / theta.sin()
    };
    Ok(s * scale)
}

pub fn log_se3(p: &Pose) -> Result<Twist, GeomError> {
    let w = log_so3(&p.rotation)?;
    let theta = w.norm();
    let k = skew(&w);
    let coeff = if theta < 1e-2 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * coeff;
    Ok(Twist::new(w, v_inv * p.translation))
}

/// Pinhole intrinsics. Pixel (u, v) denotes the pixel whose center sits at
/// integer coordinates (u, v).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeomError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Single focal length used for splat footprints.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn project(&self, x_cam: &Vector3<f64>) -> Result<(Vector2<f64>, f64), GeomError> {
        project_point(self, x_cam)
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// True when the pixel lies within the image extent [0, w-1] x [0, h-1].
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    /// Integer pixel nearest to a sub-pixel position, if it is inside the image.
    pub fn pixel_index(&self, pixel: &Vector2<f64>) -> Option<(usize, usize)> {
        let u = pixel.x.round();
        let v = pixel.y.round();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            None
        } else {
            Some((u as usize, v as usize))
        }
    }

    /// Jacobian of the pixel with respect to the camera-frame point.
    pub fn projection_jacobian(&self, x_cam: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / x_cam.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x_cam.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * x_cam.y * iz2,
        )
    }
}

/// Pinhole projection of a camera-frame point.
pub fn project_point(k: &CameraIntrinsics, x_cam: &Vector3<f64>) -> Result<(Vector2<f64>, f64), GeomError> {
    let z = x_cam.z;
    if z <= 1e-9 {
        return Err(GeomError::BehindCamera { z });
    }
    Ok((Vector2::new(k.fx * x_cam.x / z + k.cx, k.fy * x_cam.y / z + k.cy), z))
}

/// Jacobian of `exp(delta) * y` with respect to delta at delta = 0: `[-[y]x, I]`.
pub fn point_jacobian(y: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let mut j = nalgebra::Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(y)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    pub(crate) fn random_pose(rng: &mut impl Rng, max_angle: f64) -> Pose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(0.0..max_angle);
        let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        Pose::from_axis_angle(axis, angle, t)
    }

    fn pose_err(a: &Pose, b: &Pose) -> f64 {
        (a.rotation - b.rotation).abs().max().max((a.translation - b.translation).abs().max())
    }

    #[test]
    fn exp_zero_is_identity() {
        assert_eq!(exp_se3(&Twist::zero()), Pose::identity());
    }

    #[test]
    fn exp_pure_translation() {
        let p = exp_se3(&Twist::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)));
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let p = exp_se3(&Twist::new(Vector3::new(0.0, 0.0, PI / 2.0), Vector3::zeros()));
        let y = p.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((y - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn log_identity_and_translation() {
        assert_eq!(log_se3(&Pose::identity()).unwrap().to_vector(), Vector6::zeros());
        let t = log_se3(&Pose::from_translation(Vector3::new(1.0, 2.0, 3.0))).unwrap();
        assert_eq!(t.rotation, Vector3::zeros());
        assert!((t.translation - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-15);
    }

    #[test]
    fn log_rejects_angle_near_pi() {
        let p = Pose::from_axis_angle(Vector3::x(), PI - 1e-7, Vector3::zeros());
        assert!(matches!(log_se3(&p), Err(GeomError::AngleNearPi { .. })));
    }

    #[test]
    fn log_norm_symmetric_under_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_pose(&mut rng, 3.0);
            let a = log_se3(&p).unwrap();
            let b = log_se3(&p.inverse()).unwrap();
            assert!((a.norm() - b.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trips_on_random_poses_and_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = random_pose(&mut rng, 3.0);
            let back = exp_se3(&log_se3(&p).unwrap());
            assert!(pose_err(&p, &back) < 1e-9);

            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let w = axis * rng.random_range(0.0..3.0);
            let v = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let tw = Twist::new(w, v);
            let back = log_se3(&exp_se3(&tw)).unwrap();
            assert!((back.to_vector() - tw.to_vector()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        for &theta in &[1e-12, 1e-9, 1e-6, 9.9e-5, 1.01e-4, 1e-3] {
            let tw = Twist::new(Vector3::new(theta, -0.5 * theta, 0.25 * theta), Vector3::new(0.3, -0.2, 0.1));
            let back = log_se3(&exp_se3(&tw)).unwrap();
            assert!((back.to_vector() - tw.to_vector()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn pose_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = random_pose(&mut rng, 3.1);
            let rtr = p.rotation.transpose() * p.rotation;
            assert!((rtr - Matrix3::identity()).abs().max() < 1e-9);
            assert!((p.rotation.determinant() - 1.0).abs() < 1e-9);
            assert!(pose_err(&p.compose(&p.inverse()), &Pose::identity()) < 1e-9);
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let a = random_pose(&mut rng, 3.0);
            let b = random_pose(&mut rng, 3.0);
            let c = random_pose(&mut rng, 3.0);
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            assert!(pose_err(&l, &r) < 1e-12);
        }
    }

    #[test]
    fn quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let p = random_pose(&mut rng, 3.1);
            let q = p.quaternion();
            assert!(q[3] >= 0.0);
            let back = Pose::from_quaternion(p.translation, q);
            assert!(pose_err(&p, &back) < 1e-12);
        }
        assert_eq!(Pose::identity().quaternion(), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let (px, d) = project_point(&k, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(50.0, 50.0));
        assert_eq!(d, 1.0);
        let (px, _) = project_point(&k, &Vector3::new(0.5, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(100.0, 50.0));
        assert!(matches!(
            project_point(&k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeomError::BehindCamera { .. })
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 5.0, 5.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 10.0, 5.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 5.0, 10, 10).is_ok());
    }

    #[test]
    fn retract_matches_finite_difference_of_point_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_pose(&mut rng, 2.0);
        let x = Vector3::new(0.3, -1.2, 2.0);
        let y = p.transform_point(&x);
        let j = point_jacobian(&y);
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = p.retract(&d).transform_point(&x);
            d[k] = -h;
            let minus = p.retract(&d).transform_point(&x);
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - j.column(k)).norm() < 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn projection_is_scale_invariant(x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.1f64..10.0, s in 0.01f64..100.0) {
            let k = CameraIntrinsics::new(120.0, 110.0, 64.0, 48.0, 128, 96).unwrap();
            let p = Vector3::new(x, y, z);
            let (a, _) = project_point(&k, &p).unwrap();
            let (b, _) = project_point(&k, &(p * s)).unwrap();
            proptest::prop_assert!((a - b).norm() < 1e-9);
        }
    }
}
