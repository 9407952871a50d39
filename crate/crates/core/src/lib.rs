//! Simulation of active pan-tilt view planning inside a visual teach-and-repeat
//! loop.
//!
//! The crate is layered bottom-up: [`geometry`] (poses, PTU kinematics,
//! pinhole projection), [`world`] (scenes and map structures),
//! [`observation`] (identifiability, tracking, pose refinement), [`planners`]
//! (grid view planners), [`vtr`] (teach and repeat loops, metrics) and
//! [`harness`] (experiment batches, benchmarks, presets).

// `!(x > 0.0)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geometry;
pub mod harness;
pub mod observation;
pub mod planners;
pub mod vtr;
pub mod world;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, PanTilt, Pose3, PtuModel};
pub use planners::{PlanResult, Planner, PlannerConfig, PlannerKind};
pub use vtr::{Fidelity, RunResult, TaughtPath};
pub use world::Scenario;
