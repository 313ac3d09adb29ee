//! Rigid 4-DOF poses, frames and the pinhole camera.
//!
//! Frame conventions: the base z-axis points from the robot toward the
//! platform, so a camera with identity orientation looks along +z and sees
//! the target plane at positive depth. The controlled degrees of freedom are
//! translation along the base axes and rotation about the base z-axis.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Wraps an angle in degrees into `[-180, 180)`.
///
/// Values already in range are returned untouched so that small differences
/// keep full precision.
pub fn wrap_degrees(deg: f64) -> f64 {
    if (-180.0..180.0).contains(&deg) {
        return deg;
    }
    let r = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if r >= 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// End-effector pose restricted to the four controlled degrees of freedom.
///
/// Translations are in millimetres, `rz` in degrees about the base z-axis,
/// kept in `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose4 {
    x: f64,
    y: f64,
    z: f64,
    rz: f64,
}

impl Pose4 {
    pub const ZERO: Pose4 = Pose4 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        rz: 0.0,
    };

    /// Builds a pose, normalizing `rz`. Panics on non-finite input.
    pub fn new(x: f64, y: f64, z: f64, rz: f64) -> Self {
        Self::try_new(x, y, z, rz).expect("pose components must be finite")
    }

    pub fn try_new(x: f64, y: f64, z: f64, rz: f64) -> Result<Self> {
        if ![x, y, z, rz].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite pose ({x}, {y}, {z}, {rz})"
            )));
        }
        Ok(Pose4 {
            x,
            y,
            z,
            rz: wrap_degrees(rz),
        })
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn rz(&self) -> f64 {
        self.rz
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.rz]
    }

    /// Applies a base-frame increment `(dx, dy, dz, drz)`.
    pub fn offset(&self, delta: [f64; 4]) -> Pose4 {
        Pose4::new(
            self.x + delta[0],
            self.y + delta[1],
            self.z + delta[2],
            self.rz + delta[3],
        )
    }
}

fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Proper rigid motion `p ↦ R·p + t`, translation in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    const ORTHO_TOL: f64 = 1e-9;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.abs().max() > Self::ORTHO_TOL
            || (rotation.determinant() - 1.0).abs() > Self::ORTHO_TOL
        {
            return Err(Error::InvalidConfig(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite translation".into()));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation of `deg` degrees about z followed by a translation.
    pub fn from_z_rotation(deg: f64, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: rot_z(deg),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// True when the rotation axis is the z-axis (the optical axis stays
    /// parallel to the base z-axis).
    pub fn is_z_rotation(&self) -> bool {
        let r = &self.rotation;
        r[(2, 2)] > 1.0 - 1e-12
            && r[(0, 2)].abs() < 1e-9
            && r[(1, 2)].abs() < 1e-9
            && r[(2, 0)].abs() < 1e-9
            && r[(2, 1)].abs() < 1e-9
    }

    /// Rotation angle about z in degrees, assuming [`Self::is_z_rotation`].
    pub fn z_angle_degrees(&self) -> f64 {
        self.rotation[(1, 0)]
            .atan2(self.rotation[(0, 0)])
            .to_degrees()
    }
}

/// Camera pose in the base frame for an end-effector pose: the end-effector
/// frame (translation then rotation about base z) composed with the fixed
/// camera mounting offset.
pub fn pose_to_transform(pose: &Pose4, mounting: &RigidTransform) -> RigidTransform {
    let effector =
        RigidTransform::from_z_rotation(pose.rz(), Vector3::new(pose.x(), pose.y(), pose.z()));
    effector.compose(mounting)
}

/// Inverse of [`pose_to_transform`] for mountings that rotate about z only.
pub fn transform_to_pose(camera: &RigidTransform, mounting: &RigidTransform) -> Pose4 {
    let effector = camera.compose(&mounting.inverse());
    let t = effector.translation();
    Pose4::new(t.x, t.y, t.z, effector.z_angle_degrees())
}

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
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && fx.is_finite()
            && fy.is_finite()
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy);
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "bad intrinsics fx={fx} fy={fy} cx={cx} cy={cy} size={width}x{height}"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// 64×64 camera whose field of view keeps a 55×33 mm target fully in
    /// frame for ±60 mm lateral offsets and any yaw at 250 mm.
    pub fn desk_default() -> Self {
        Self::new(66.0, 66.0, 32.0, 32.0, 64, 64).expect("valid defaults")
    }
}

/// Pinhole projection of a camera-frame point (mm) to pixel coordinates.
pub fn project_point(k: &CameraIntrinsics, p: &Vector3<f64>) -> Result<Vector2<f64>> {
    if p.z <= 0.0 {
        return Err(Error::NonPositiveDepth { depth: p.z });
    }
    Ok(Vector2::new(
        k.cx + k.fx * p.x / p.z,
        k.cy + k.fy * p.y / p.z,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_abs(m: &Matrix3<f64>) -> f64 {
        m.abs().max()
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_degrees(0.0), 0.0);
        assert_eq!(wrap_degrees(180.0), -180.0);
        assert_eq!(wrap_degrees(-180.0), -180.0);
        assert_eq!(wrap_degrees(340.0), -20.0);
        assert_eq!(wrap_degrees(-190.0), 170.0);
        assert_eq!(wrap_degrees(0.1), 0.1);
    }

    #[test]
    fn zero_pose_is_identity() {
        let t = pose_to_transform(&Pose4::ZERO, &RigidTransform::identity());
        assert!(max_abs(&(t.rotation() - Matrix3::identity())) < 1e-12);
        assert!(t.translation().norm() < 1e-12);
    }

    #[test]
    fn quarter_turn_maps_x_to_y() {
        let t = pose_to_transform(&Pose4::new(0.0, 0.0, 0.0, 90.0), &RigidTransform::identity());
        let v = t.apply_vector(&Vector3::x());
        assert!((v - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn pure_translation() {
        let t = pose_to_transform(
            &Pose4::new(10.0, 20.0, 30.0, 0.0),
            &RigidTransform::identity(),
        );
        assert_eq!(*t.translation(), Vector3::new(10.0, 20.0, 30.0));
        assert!(max_abs(&(t.rotation() - Matrix3::identity())) < 1e-12);
    }

    #[test]
    fn rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let p = project_point(&k, &Vector3::new(0.0, 0.0, 200.0)).unwrap();
        assert_eq!(p, Vector2::new(32.0, 32.0));
        let p = project_point(&k, &Vector3::new(20.0, 0.0, 200.0)).unwrap();
        assert_eq!(p, Vector2::new(42.0, 32.0));
        assert!(matches!(
            project_point(&k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::NonPositiveDepth { .. })
        ));
        assert!(project_point(&k, &Vector3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn mounting_round_trip() {
        let mount = RigidTransform::from_z_rotation(30.0, Vector3::new(5.0, -3.0, 12.0));
        let pose = Pose4::new(12.5, -40.0, 80.0, -33.0);
        let back = transform_to_pose(&pose_to_transform(&pose, &mount), &mount);
        for (a, b) in pose.to_array().iter().zip(back.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn transform_inverse_is_identity(
            x in -500.0..500.0f64, y in -500.0..500.0f64, z in -500.0..500.0f64,
            rz in -180.0..180.0f64, mrz in -180.0..180.0f64,
            mx in -50.0..50.0f64, my in -50.0..50.0f64, mz in -50.0..50.0f64,
        ) {
            let mount = RigidTransform::from_z_rotation(mrz, Vector3::new(mx, my, mz));
            let t = pose_to_transform(&Pose4::new(x, y, z, rz), &mount);
            let id = t.compose(&t.inverse());
            prop_assert!(max_abs(&(id.rotation() - Matrix3::identity())) < 1e-9);
            prop_assert!(id.translation().norm() < 1e-9);
        }

        #[test]
        fn projection_is_depth_homogeneous(
            x in -100.0..100.0f64, y in -100.0..100.0f64, z in 1.0..1000.0f64, k in 0.01..100.0f64,
        ) {
            let cam = CameraIntrinsics::desk_default();
            let a = project_point(&cam, &Vector3::new(x, y, z)).unwrap();
            let b = project_point(&cam, &Vector3::new(k * x, k * y, k * z)).unwrap();
            prop_assert!((a - b).norm() < 1e-9);
        }

        #[test]
        fn wrapped_angle_in_range(d in -1e4..1e4f64) {
            let w = wrap_degrees(d);
            prop_assert!((-180.0..180.0).contains(&w));
            let turns = (d - w) / 360.0;
            prop_assert!((turns - turns.round()).abs() < 1e-9);
        }
    }
}
