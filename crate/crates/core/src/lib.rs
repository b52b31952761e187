//! Probabilistic two-stage object detection at desk scale.
//!
//! The crate pairs a dense class-agnostic first stage with a conditional
//! second-stage classifier and scores detections with the product of the
//! first-stage objectness and the second-stage class posterior. Everything
//! is small enough to train with closed-form gradients on synthetic scenes.

pub mod assignment;
pub mod config;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod fedloss;
pub mod geometry;
pub mod probcore;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, GeometryError, Result};

/// Version string embedded in every written artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
