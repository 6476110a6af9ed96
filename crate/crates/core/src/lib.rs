//! Eye tracking from screen reflections by analysis-by-synthesis.
//!
//! A parametric eye mesh is ray traced against a calibrated camera and display,
//! and its pose and shape are recovered by gradient descent on the mismatch
//! between rendered and decoded screen correspondences.

pub mod autodiff;
pub mod bvh;
pub mod error;
pub mod patterns;
pub mod render;
pub mod eye_model;
pub mod glint;
pub mod harness;
pub mod losses;
pub mod scene;
pub mod so3;
pub mod solver;

pub use error::{Error, Result};
