//! Hybrid deformable registration of tetrahedral organ meshes.
//!
//! The pipeline estimates intraoperative organ deformation from sparse
//! measurements in three steps: a salient-feature-weighted rigid alignment,
//! a linear-elastic deformation-basis reconstruction (LIBR), and a learned
//! correction produced by a dual-branch spline graph network (SR-GCN) that
//! predicts the residual between the linear-physics solution and the true
//! deformation.

pub mod error;
pub mod eval;
pub mod fem;
pub mod mesh;
pub mod registration;
pub mod srgcn;
pub mod synth;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
