//! Longitudinal registration of one subject's scans through latent transforms.
//!
//! Pairwise rigid and nonlinear registrations between all timepoints are
//! mapped into their Lie algebras (se(3) vectors and stationary velocity
//! fields) and reconciled by a least-absolute-deviations solve into one
//! latent transform per timepoint. The latent transforms then drive a
//! subject template, linear trajectories, longitudinal label fusion and
//! group statistics.

pub mod error;
pub mod geometry;
pub mod graph;
pub mod inference;
pub mod longseg;
pub mod phantom;
pub mod registration;
pub mod stats;
pub mod template;
pub mod trajectory;
pub mod volume_io;

pub use error::{Error, Result};
