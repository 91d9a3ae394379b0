//! Classical registration: salient-feature-weighted rigid ICP and the
//! linearized iterative boundary reconstruction (LIBR) over an elastic
//! deformation basis.

pub mod libr;
pub mod wicp;

pub use libr::{
    apply_deformation, farthest_point_sample, libr_build_basis, libr_reconstruct, load_basis,
    save_basis, solve_weights, support_patch, DeformationBasis, LibrBasisOptions, LibrOptions,
    LibrSolution,
};
pub use wicp::{wicp_register, WicpReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Proper rigid transform `p -> R p + t` with row-major rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn apply_all(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points.iter().map(|&p| self.apply(p)).collect()
    }

    /// Inverse transform `p -> R^T (p - t)`.
    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let neg = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        RigidTransform {
            rotation: rt,
            translation: neg,
        }
    }

    /// Composition `self ∘ other`, i.e. `p -> self(other(p))`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    rotation[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        let translation = self.apply(other.translation);
        RigidTransform {
            rotation,
            translation,
        }
    }

    /// Deviation from orthonormality, `max |R^T R - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Validates the proper-rotation invariants.
    pub fn validate(&self) -> Result<()> {
        let ortho = self.orthonormality_error();
        if ortho > 1e-10 {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal: max |R'R - I| = {ortho:.3e}"
            )));
        }
        if self.determinant() <= 0.0 {
            return Err(Error::invalid(format!(
                "rotation has non-positive determinant {}",
                self.determinant()
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation has non-finite entries"));
        }
        Ok(())
    }
}
