//! Eye-in-hand visual servoing on a simulated desk-scale manipulator.
//!
//! Two controllers drive the same 4-DOF simulated arm:
//!
//! * [`ibvs`]: the classical image-based servo, point features pushed through
//!   the analytic interaction matrix and its pseudo-inverse.
//! * [`controller`]: a two-stream controller in which one shared CNN pose
//!   regressor ([`regressor`]) reads the desired and the current image, and
//!   each degree of freedom is driven by its own proportional gain.
//!
//! [`data`] generates and splits synthetic datasets, [`nn`] is the
//! from-scratch network core, and [`harness`] runs closed-loop episodes and
//! exports their traces.

pub mod controller;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod ibvs;
pub mod image;
pub mod nn;
pub mod regressor;
pub mod render;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, Pose4, RigidTransform};
pub use image::ImageBuffer;
pub use render::{Scene, TargetModel};
