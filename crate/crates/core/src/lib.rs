//! Radiance fields that fuse a coordinate MLP with tensorial plane features.
//!
//! The encoder sees raw sample coordinates alongside fused plane/vector
//! features through residual concatenation, so the coordinate path carries
//! low-frequency structure while the planes add detail. Plane channels can be
//! engaged progressively with a curriculum schedule.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod field;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod raster;
pub mod real;
pub mod render;
pub mod schedule;
pub mod task2d;

pub use error::{Error, Result};
pub use field::{FeatureInputs, FieldModel, GradStore, ModelConfig};
pub use grid::{PlaneSet, SceneMode};
pub use real::Real;
