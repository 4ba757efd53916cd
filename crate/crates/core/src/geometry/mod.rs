//! Lie-algebra parameterisations of spatial transforms and the voxel
//! machinery they act on: SE(3) exp/log, SVF integration, field
//! composition, interpolation and Jacobian determinants.

pub mod field;
pub mod grid;
pub mod sample;
pub mod se3;
pub mod smooth;

pub use field::{
    compose_displacements, displacement_jacobian, jacobian_determinant, squaring_steps, svf_exp,
    Direction, DisplacementField, Svf, VectorField,
};
pub use grid::{Grid, GridSpec};
pub use sample::{trilinear_sample, trilinear_sample_vectors, Boundary};
pub use se3::{log_compose, se3_exp, se3_log, RigidLog, RigidTransform};
