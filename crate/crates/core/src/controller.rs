//! Two-stream pose-based controller: one shared regressor evaluated on the
//! desired and current images, and a decoupled proportional law per axis.

use crate::error::{Error, Result};
use crate::geometry::{wrap_degrees, Pose4};
use crate::image::ImageBuffer;
use crate::regressor::PosePredictor;

/// Default per-axis gain for the learned episode loop.
pub const DEFAULT_EPISODE_GAIN: f64 = 0.2;

/// Per-axis gain used in the reference robot experiment.
pub const REFERENCE_GAIN: f64 = 0.03;

/// Per-axis proportional gains `(λ1, λ2, λ3, λ4)` for x, y, z, rz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainVector([f64; 4]);

impl GainVector {
    /// Rejects non-positive or non-finite gains. Gains in `[1, 2)` are
    /// accepted but overshoot; they are reported by [`Self::warnings`].
    pub fn new(gains: [f64; 4]) -> Result<Self> {
        if let Some(g) = gains.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return Err(Error::InvalidConfig(format!("gains must be positive, got {g}")));
        }
        Ok(GainVector(gains))
    }

    pub fn uniform(gain: f64) -> Result<Self> {
        Self::new([gain; 4])
    }

    pub fn values(&self) -> [f64; 4] {
        self.0
    }

    /// Stability notes for gains at or beyond 1 (oscillating) and 2
    /// (divergent under a perfect estimate).
    pub fn warnings(&self) -> Vec<String> {
        let axes = ["x", "y", "z", "rz"];
        self.0
            .iter()
            .zip(axes)
            .filter_map(|(g, axis)| {
                if *g >= 2.0 {
                    Some(format!("gain {g} on {axis} diverges even with a perfect estimate"))
                } else if *g >= 1.0 {
                    Some(format!("gain {g} on {axis} overshoots the goal every step"))
                } else {
                    None
                }
            })
            .collect()
    }
}

impl Default for GainVector {
    fn default() -> Self {
        GainVector([REFERENCE_GAIN; 4])
    }
}

/// `current − desired`, with the rotation difference wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseError {
    pub ex: f64,
    pub ey: f64,
    pub ez: f64,
    pub erz: f64,
}

impl PoseError {
    pub fn to_array(&self) -> [f64; 4] {
        [self.ex, self.ey, self.ez, self.erz]
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// True when every axis is within the matching tolerance (inclusive).
    pub fn within(&self, tolerance: &[f64; 4]) -> bool {
        self.to_array()
            .iter()
            .zip(tolerance)
            .all(|(e, t)| e.abs() <= *t)
    }
}

/// Per-step pose increment: mm and degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlCommand {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub drz: f64,
}

impl ControlCommand {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dz, self.drz]
    }

    /// Kinematic actuation: the pose moves by exactly the command.
    pub fn apply(&self, pose: &Pose4) -> Pose4 {
        pose.offset(self.to_array())
    }
}

pub fn pose_error(current: &Pose4, desired: &Pose4) -> PoseError {
    PoseError {
        ex: current.x() - desired.x(),
        ey: current.y() - desired.y(),
        ez: current.z() - desired.z(),
        erz: wrap_degrees(current.rz() - desired.rz()),
    }
}

/// `−λᵢ · eᵢ` for each axis independently.
pub fn proportional_command(e: &PoseError, gains: &GainVector) -> ControlCommand {
    let g = gains.values();
    // 0.0 − x keeps a zero error from producing −0.0
    ControlCommand {
        dx: 0.0 - g[0] * e.ex,
        dy: 0.0 - g[1] * e.ey,
        dz: 0.0 - g[2] * e.ez,
        drz: 0.0 - g[3] * e.erz,
    }
}

/// Stateless two-stream step: both images go through the same predictor.
pub fn controller_step(
    predictor: &(impl PosePredictor + ?Sized),
    current_image: &ImageBuffer,
    desired_image: &ImageBuffer,
    gains: &GainVector,
) -> Result<(ControlCommand, PoseError)> {
    let current = predictor.predict_pose(current_image)?;
    let desired = predictor.predict_pose(desired_image)?;
    let e = pose_error(&current, &desired);
    Ok((proportional_command(&e, gains), e))
}

/// Episode-scoped controller that evaluates the desired stream once.
pub struct TwoStreamController<'a, P: PosePredictor + ?Sized> {
    predictor: &'a P,
    desired_estimate: Pose4,
    gains: GainVector,
}

impl<'a, P: PosePredictor + ?Sized> TwoStreamController<'a, P> {
    pub fn new(predictor: &'a P, desired_image: &ImageBuffer, gains: GainVector) -> Result<Self> {
        Ok(TwoStreamController {
            desired_estimate: predictor.predict_pose(desired_image)?,
            predictor,
            gains,
        })
    }

    pub fn desired_estimate(&self) -> Pose4 {
        self.desired_estimate
    }

    pub fn step(&self, current_image: &ImageBuffer) -> Result<(ControlCommand, PoseError)> {
        let current = self.predictor.predict_pose(current_image)?;
        let e = pose_error(&current, &self.desired_estimate);
        Ok((proportional_command(&e, &self.gains), e))
    }
}
