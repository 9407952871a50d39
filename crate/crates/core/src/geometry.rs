//! Rigid-body algebra, pinhole projection and pan-tilt kinematics.
//!
//! Frame conventions used throughout the crate:
//!
//! * A [`Pose3`] maps body coordinates into world coordinates (`p_w = R p_b + t`),
//!   so `translation` is the body origin in the world.
//! * World and robot frames are x forward, y left, z up.
//! * The camera body frame shares that convention: its focal line is +x.
//!   Projection converts to the optical convention (x right, y down, z forward)
//!   internally.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid transform in SE(3), body-to-world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Planar pose `(x, y, yaw)` lifted to 3-D at height `z`.
    pub fn from_planar(x: f64, y: f64, yaw: f64, z: f64) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(x, y, z),
        )
    }

    /// Builds a pose from a rotation matrix that is assumed orthonormal.
    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    ///
    /// The quaternion is renormalized after every product so that long chains of
    /// compositions do not drift off the unit sphere.
    pub fn compose(&self, other: &Pose3) -> Pose3 {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        Pose3 {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let inv = self.rotation.inverse();
        Pose3 {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// World point expressed in this body frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// Unit direction of the body +x axis in the world (the focal line for cameras).
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::x()
    }

    /// Heading of the body +x axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        let f = self.forward();
        f.y.atan2(f.x)
    }

    pub fn planar(&self) -> (f64, f64, f64) {
        (self.translation.x, self.translation.y, self.yaw())
    }

    /// Largest element-wise difference of the homogeneous matrices.
    pub fn max_abs_diff(&self, other: &Pose3) -> f64 {
        (self.to_matrix() - other.to_matrix()).abs().max()
    }

    /// Rotation angle of `self⁻¹ ∘ other`.
    pub fn rotation_angle_to(&self, other: &Pose3) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// Quaternion components in (x, y, z, w) order.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn from_quaternion_xyzw(q: [f64; 4], translation: Vector3<f64>) -> Self {
        Self::new(
            UnitQuaternion::new_normalize(Quaternion::new(q[3], q[0], q[1], q[2])),
            translation,
        )
    }
}

impl Mul for Pose3 {
    type Output = Pose3;

    fn mul(self, rhs: Pose3) -> Pose3 {
        self.compose(&rhs)
    }
}

pub fn compose(a: &Pose3, b: &Pose3) -> Pose3 {
    a.compose(b)
}

pub fn inverse(p: &Pose3) -> Pose3 {
    p.inverse()
}

/// Pan and tilt angles of the PTU, radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PanTilt {
    pub pan: f64,
    pub tilt: f64,
}

impl PanTilt {
    pub fn new(pan: f64, tilt: f64) -> Self {
        Self { pan, tilt }
    }

    pub fn from_degrees(pan: f64, tilt: f64) -> Self {
        Self::new(pan.to_radians(), tilt.to_radians())
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

/// Kinematic model of the pan-tilt unit.
///
/// Pan rotates about the mount's +z (up) axis, tilt about the resulting +y
/// (left) axis. The optical center sits at `lever_arm` in the fully rotated
/// frame, so the default zero lever arm keeps it on the pan axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtuModel {
    pub pan_limit: f64,
    pub tilt_limit: f64,
    pub lever_arm: Vector3<f64>,
}

impl Default for PtuModel {
    fn default() -> Self {
        Self {
            pan_limit: 30f64.to_radians(),
            tilt_limit: 30f64.to_radians(),
            lever_arm: Vector3::zeros(),
        }
    }
}

const LIMIT_SLACK: f64 = 1e-9;

impl PtuModel {
    pub fn check(&self, q: PanTilt) -> Result<()> {
        if q.pan.abs() > self.pan_limit + LIMIT_SLACK || q.tilt.abs() > self.tilt_limit + LIMIT_SLACK
        {
            return Err(Error::LimitViolation {
                pan: q.pan,
                tilt: q.tilt,
                pan_limit: self.pan_limit,
                tilt_limit: self.tilt_limit,
            });
        }
        Ok(())
    }

    pub fn clamp(&self, q: PanTilt) -> PanTilt {
        PanTilt::new(
            q.pan.clamp(-self.pan_limit, self.pan_limit),
            q.tilt.clamp(-self.tilt_limit, self.tilt_limit),
        )
    }

    /// Mount-to-camera transform `T_pt(q)` with limit checking.
    pub fn transform(&self, q: PanTilt) -> Result<Pose3> {
        self.check(q)?;
        Ok(self.transform_unchecked(q))
    }

    pub fn transform_unchecked(&self, q: PanTilt) -> Pose3 {
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q.pan)
            * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), q.tilt);
        Pose3::new(rotation, rotation * self.lever_arm)
    }

    /// Robot (mount) pose from a camera pose and the PTU angles it was taken at.
    pub fn robot_pose_from_camera(&self, camera: &Pose3, q: PanTilt) -> Pose3 {
        camera.compose(&self.transform_unchecked(q).inverse())
    }

    pub fn camera_pose_from_robot(&self, robot: &Pose3, q: PanTilt) -> Pose3 {
        robot.compose(&self.transform_unchecked(q))
    }
}

/// `T_pt(q)` under the default PTU model.
pub fn ptu_transform(q: PanTilt) -> Result<Pose3> {
    PtuModel::default().transform(q)
}

pub fn robot_pose_from_camera(camera: &Pose3, q: PanTilt) -> Pose3 {
    PtuModel::default().robot_pose_from_camera(camera, q)
}

pub fn camera_pose_from_robot(robot: &Pose3, q: PanTilt) -> Pose3 {
    PtuModel::default().camera_pose_from_robot(robot, q)
}

/// Pinhole intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraIntrinsics {
    /// 640×480 with a 69°×42° field of view.
    fn default() -> Self {
        Self::from_fov(640.0, 480.0, 69f64.to_radians(), 42f64.to_radians())
    }
}

impl CameraIntrinsics {
    pub fn from_fov(width: f64, height: f64, hfov: f64, vfov: f64) -> Self {
        Self {
            fx: (width / 2.0) / (hfov / 2.0).tan(),
            fy: (height / 2.0) / (vfov / 2.0).tan(),
            cx: width / 2.0,
            cy: height / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width
            && self.cy > 0.0
            && self.cy < self.height;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Larger of the two horizontal half-angles.
    pub fn half_fov_h(&self) -> f64 {
        (self.cx.max(self.width - self.cx) / self.fx).atan()
    }

    pub fn half_fov_v(&self) -> f64 {
        (self.cy.max(self.height - self.cy) / self.fy).atan()
    }

    pub fn in_bounds(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x <= self.width && pixel.y >= 0.0 && pixel.y <= self.height
    }

    /// Pixel of an optical-frame point (x right, y down, z forward).
    pub fn project_optical(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Unit viewing ray of a pixel in the camera body frame.
    pub fn back_project(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let x = (pixel.x - self.cx) / self.fx;
        let y = (pixel.y - self.cy) / self.fy;
        optical_to_body(&Vector3::new(x, y, 1.0)).normalize()
    }
}

#[inline]
pub fn body_to_optical(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-p.y, -p.z, p.x)
}

#[inline]
pub fn optical_to_body(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(p.z, -p.x, -p.y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub in_view: bool,
}

/// Projects a world point through a camera at `camera` (body-to-world).
pub fn project(k: &CameraIntrinsics, camera: &Pose3, p: &Vector3<f64>) -> Result<Projection> {
    let optical = body_to_optical(&camera.inverse_transform_point(p));
    if optical.z <= 0.0 {
        return Err(Error::BehindCamera(optical.z));
    }
    let pixel = k.project_optical(&optical);
    Ok(Projection {
        pixel,
        depth: optical.z,
        in_view: k.in_bounds(&pixel),
    })
}

/// Angle in `[0, π]` between two nonzero vectors.
pub fn angle_between(u: &Vector3<f64>, v: &Vector3<f64>) -> Result<f64> {
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::Degenerate("zero-length vector in angle computation"));
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0).acos())
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}
