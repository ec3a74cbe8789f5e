//! Goal recognition for road vehicles under occlusion.
//!
//! The pipeline runs occlusion detection, goal generation, feature
//! extraction, per-goal-type decision trees and a Bayesian posterior.

pub mod datakit;
pub mod dtree;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod goals;
pub mod inference;
pub mod occlusion;
pub mod scene;
pub mod verify;

pub use error::{Error, Result};
