//! Planar textured target and the deterministic synthetic camera.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{pose_to_transform, project_point, CameraIntrinsics, Pose4, RigidTransform};
use crate::image::ImageBuffer;

/// Intensity of everything that is not the target.
pub const BACKGROUND: f64 = 0.1;

/// Sub-samples per pixel along each axis for pixels that straddle an edge;
/// each sub-sample is a nearest-neighbour texture lookup and the pixel is
/// their mean.
const SUPERSAMPLE: usize = 16;

pub const DEFAULT_TARGET_LENGTH: f64 = 55.0;
pub const DEFAULT_TARGET_WIDTH: f64 = 33.0;
/// Base-frame depth of the platform the target lies on.
pub const DEFAULT_PLATFORM_DEPTH: f64 = 400.0;
pub const DEFAULT_TEXTURE_SEED: u64 = 7;

/// Grayscale grid spread over the target plane; column index runs along the
/// target's length (x), row index along its width (y).
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    cols: usize,
    rows: usize,
    values: Vec<f64>,
}

impl Texture {
    pub fn new(cols: usize, rows: usize, values: Vec<f64>) -> Result<Self> {
        if cols == 0 || rows == 0 || values.len() != cols * rows {
            return Err(Error::InvalidConfig("texture grid size mismatch".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("texture value outside [0, 1]".into()));
        }
        Ok(Texture { cols, rows, values })
    }

    /// Light plate with a dark block in the (+x, -y) corner, plus seeded
    /// per-cell noise. The block breaks every rotational symmetry of the
    /// rectangle, so Rz is observable from a single view.
    pub fn procedural(seed: u64) -> Self {
        let (cols, rows) = (11, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(cols * rows);
        for row in 0..rows {
            for col in 0..cols {
                let base = if col >= 7 && row < 3 { 0.45 } else { 0.9 };
                values.push(base + rng.gen_range(-0.08..0.08));
            }
        }
        Texture { cols, rows, values }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

}

/// Flat rectangular target lying in its own `z = 0` plane. The target frame
/// is parallel to the base frame and sits at `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    corner_points: Vec<Vector3<f64>>,
    texture: Texture,
    length: f64,
    width: f64,
    origin: Vector3<f64>,
}

impl Default for TargetModel {
    fn default() -> Self {
        Self::new(
            DEFAULT_TARGET_LENGTH,
            DEFAULT_TARGET_WIDTH,
            Texture::procedural(DEFAULT_TEXTURE_SEED),
            Vector3::new(0.0, 0.0, DEFAULT_PLATFORM_DEPTH),
        )
        .expect("valid defaults")
    }
}

impl TargetModel {
    pub fn new(length: f64, width: f64, texture: Texture, origin: Vector3<f64>) -> Result<Self> {
        if !(length > 0.0 && width > 0.0) {
            return Err(Error::InvalidConfig("target extents must be positive".into()));
        }
        let (hl, hw) = (length / 2.0, width / 2.0);
        let corner_points = vec![
            Vector3::new(-hl, -hw, 0.0),
            Vector3::new(hl, -hw, 0.0),
            Vector3::new(hl, hw, 0.0),
            Vector3::new(-hl, hw, 0.0),
        ];
        Ok(TargetModel {
            corner_points,
            texture,
            length,
            width,
            origin,
        })
    }

    pub fn corner_points(&self) -> &[Vector3<f64>] {
        &self.corner_points
    }

    /// Corners expressed in the base frame.
    pub fn corners_in_base(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.corner_points.iter().map(|c| c + self.origin)
    }

    pub fn texture(&self) -> &Texture {
        &self.texture
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.origin
    }

    /// Texture cell index at a target-plane point, `None` off the plate.
    fn cell(&self, px: f64, py: f64) -> Option<usize> {
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        if !(px.abs() <= hl && py.abs() <= hw) {
            return None;
        }
        let t = &self.texture;
        let col = (((px + hl) / self.length) * t.cols as f64) as usize;
        let row = (((py + hw) / self.width) * t.rows as f64) as usize;
        Some(row.min(t.rows - 1) * t.cols + col.min(t.cols - 1))
    }
}

/// Renders the target seen from a camera pose (camera-to-base transform).
///
/// Pure: identical arguments produce bit-identical buffers.
pub fn render_target(
    intrinsics: &CameraIntrinsics,
    camera: &RigidTransform,
    target: &TargetModel,
) -> Result<ImageBuffer> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let rot = camera.rotation();
    let eye = camera.translation();
    let plane_z = target.origin().z;
    let values = target.texture().values();
    let cell_at = |u: f64, v: f64| -> Option<usize> {
        let ray = rot * Vector3::new((u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0);
        if ray.z <= 0.0 {
            return None;
        }
        let lambda = (plane_z - eye.z) / ray.z;
        if lambda <= 0.0 {
            return None;
        }
        let p = eye + ray * lambda - target.origin();
        target.cell(p.x, p.y)
    };
    let bounds = projected_bounds(intrinsics, camera, target);
    let inv_n = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;

    let mut pixels = Vec::with_capacity(w * h);
    let mut hits = 0usize;
    for row in 0..h {
        for col in 0..w {
            let (u0, v0) = (col as f64, row as f64);
            if let Some((umin, umax, vmin, vmax)) = bounds {
                if u0 + 1.0 < umin || u0 > umax || v0 + 1.0 < vmin || v0 > vmax {
                    pixels.push(BACKGROUND);
                    continue;
                }
            }
            // A pixel whose corners all land in one convex texture cell lies
            // wholly inside it.
            let corner = cell_at(u0, v0);
            if corner.is_some()
                && [(u0 + 1.0, v0), (u0, v0 + 1.0), (u0 + 1.0, v0 + 1.0)]
                    .iter()
                    .all(|&(u, v)| cell_at(u, v) == corner)
            {
                hits += 1;
                pixels.push(values[corner.expect("checked")]);
                continue;
            }
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                let v = v0 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                for sx in 0..SUPERSAMPLE {
                    let u = u0 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    acc += match cell_at(u, v) {
                        Some(i) => {
                            hits += 1;
                            values[i]
                        }
                        None => BACKGROUND,
                    };
                }
            }
            pixels.push((acc * inv_n).clamp(0.0, 1.0));
        }
    }
    if hits == 0 {
        return Err(Error::TargetNotVisible);
    }
    ImageBuffer::new(w, h, pixels)
}

/// Image-space bounding box of the target, `None` unless every corner is in
/// front of the camera.
fn projected_bounds(
    intrinsics: &CameraIntrinsics,
    camera: &RigidTransform,
    target: &TargetModel,
) -> Option<(f64, f64, f64, f64)> {
    let to_camera = camera.inverse();
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in target.corners_in_base() {
        let p = project_point(intrinsics, &to_camera.apply(&c)).ok()?;
        b = (b.0.min(p.x), b.1.max(p.x), b.2.min(p.y), b.3.max(p.y));
    }
    Some(b)
}

/// Camera, mounting and target: everything needed to turn a pose into an
/// observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub intrinsics: CameraIntrinsics,
    pub mounting: RigidTransform,
    pub target: TargetModel,
}

impl Default for Scene {
    fn default() -> Self {
        Scene {
            intrinsics: CameraIntrinsics::desk_default(),
            mounting: RigidTransform::identity(),
            target: TargetModel::default(),
        }
    }
}

impl Scene {
    /// The mounting may only rotate about the optical axis, otherwise the
    /// camera would not stay parallel to the platform under 4-DOF motion.
    pub fn new(
        intrinsics: CameraIntrinsics,
        mounting: RigidTransform,
        target: TargetModel,
    ) -> Result<Self> {
        if !mounting.is_z_rotation() {
            return Err(Error::InvalidConfig(
                "camera mounting must rotate about the optical axis only".into(),
            ));
        }
        Ok(Scene {
            intrinsics,
            mounting,
            target,
        })
    }

    pub fn camera_pose(&self, pose: &Pose4) -> RigidTransform {
        pose_to_transform(pose, &self.mounting)
    }

    pub fn render(&self, pose: &Pose4) -> Result<ImageBuffer> {
        render_target(&self.intrinsics, &self.camera_pose(pose), &self.target)
    }

    pub fn is_visible(&self, pose: &Pose4) -> bool {
        self.render(pose).is_ok()
    }
}
