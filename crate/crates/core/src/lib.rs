//! Multi-modal point cloud registration from RGB-D views.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod matching;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synthetic;
pub mod transformer;
pub mod weights;

pub use error::{Error, Result};
