//! Class-incremental 3D object detection on synthetic point clouds.
//!
//! The crate bundles a small reverse-mode autodiff engine, a scene generator,
//! a vote-style detector with prompt-guided center refinement, distillation
//! losses for incremental training, detection metrics, and an experiment
//! runner with a command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod cli;
mod container;
pub mod detector;
pub mod distill;
pub mod error;
pub mod eval;
pub mod numeric;
pub mod prompt;
pub mod scene;
pub mod trainer;

pub use container::write_atomic;
pub use error::{Error, Result};
