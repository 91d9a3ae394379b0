//! Geometrically nonlinear quasi-static solver: corotational linear
//! elasticity with Newton iterations and incremental load stepping.
//!
//! Each element keeps its small-strain stiffness from the rest
//! configuration; at every Newton iteration the element rotation is
//! extracted from the deformation gradient by polar decomposition, internal
//! forces are evaluated as `R K (R' x - X)`, and the tangent is the
//! stiffness-warped `R K R'`.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SMatrix};

use crate::error::{Error, Result};
use crate::fem::sparse::{jacobi_pcg, norm, CgSettings, CsrMatrix};
use crate::fem::{dof_pattern, element_stiffness, Material, SolveSettings};
use crate::mesh::TetMesh;

/// Convergence/robustness settings for the Newton loop.
#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    /// Residual tolerance relative to the residual at the start of each
    /// load step.
    pub tol: f64,
    pub max_iterations: usize,
    /// Number of increments the prescribed displacements are ramped over.
    pub load_steps: usize,
    /// Inner linear-solve settings.
    pub linear: SolveSettings,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tol: 1e-6,
            max_iterations: 30,
            load_steps: 1,
            linear: SolveSettings::default(),
        }
    }
}

/// Diagnostics of a corotational solve.
#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub newton_iterations: usize,
    /// Relative residual of the final accepted iterate.
    pub final_residual: f64,
}

struct ElementData {
    tet: [usize; 4],
    ke: SMatrix<f64, 12, 12>,
    dm_inv: Matrix3<f64>,
    rest: [f64; 12],
}

fn edge_matrix(v: &[[f64; 3]; 4]) -> Matrix3<f64> {
    Matrix3::from_columns(&[
        nalgebra::Vector3::new(v[1][0] - v[0][0], v[1][1] - v[0][1], v[1][2] - v[0][2]),
        nalgebra::Vector3::new(v[2][0] - v[0][0], v[2][1] - v[0][1], v[2][2] - v[0][2]),
        nalgebra::Vector3::new(v[3][0] - v[0][0], v[3][1] - v[0][1], v[3][2] - v[0][2]),
    ])
}

/// Rotation factor of the polar decomposition `f = R U`, with the
/// reflection (if any) folded into the stretch factor.
fn polar_rotation(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = f.svd(true, true);
    let u = svd.u.expect("3x3 SVD always produces U");
    let v_t = svd.v_t.expect("3x3 SVD always produces V^T");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the column of the smallest singular value.
        let mut min_i = 0;
        for i in 1..3 {
            if svd.singular_values[i] < svd.singular_values[min_i] {
                min_i = i;
            }
        }
        let mut u = u;
        for row in 0..3 {
            u[(row, min_i)] = -u[(row, min_i)];
        }
        r = u * v_t;
    }
    r
}

fn prepare_elements(mesh: &TetMesh, material: &Material) -> Result<Vec<ElementData>> {
    let mut elements = Vec::with_capacity(mesh.tets.len());
    for (ti, tet) in mesh.tets.iter().enumerate() {
        let verts = [
            mesh.vertices[tet[0]],
            mesh.vertices[tet[1]],
            mesh.vertices[tet[2]],
            mesh.vertices[tet[3]],
        ];
        let ke = element_stiffness(&verts, material).map_err(|e| match e {
            Error::DegenerateTet { volume, .. } => Error::DegenerateTet { index: ti, volume },
            other => other,
        })?;
        let dm = edge_matrix(&verts);
        let dm_inv = dm
            .try_inverse()
            .ok_or(Error::DegenerateTet { index: ti, volume: 0.0 })?;
        let mut rest = [0.0; 12];
        for (i, v) in verts.iter().enumerate() {
            rest[3 * i..3 * i + 3].copy_from_slice(v);
        }
        elements.push(ElementData {
            tet: *tet,
            ke,
            dm_inv,
            rest,
        })
    }
    Ok(elements)
}

/// Assembles internal forces and (optionally) the warped tangent for the
/// displacement state `u`.
fn assemble_state(
    elements: &[ElementData],
    u: &[f64],
    f_int: &mut [f64],
    mut tangent: Option<&mut CsrMatrix>,
) {
    f_int.iter_mut().for_each(|v| *v = 0.0);
    if let Some(k) = tangent.as_deref_mut() {
        k.values.iter_mut().for_each(|v| *v = 0.0);
    }
    for el in elements {
        let mut cur = [[0.0f64; 3]; 4];
        let mut x = [0.0f64; 12];
        for (i, &v) in el.tet.iter().enumerate() {
            for a in 0..3 {
                cur[i][a] = el.rest[3 * i + a] + u[3 * v + a];
                x[3 * i + a] = cur[i][a];
            }
        }
        let f = edge_matrix(&cur) * el.dm_inv;
        let r = polar_rotation(&f);

        // Block-diagonal rotation applied to the 12-vectors.
        let rot = |m: &Matrix3<f64>, v: &[f64; 12]| -> [f64; 12] {
            let mut out = [0.0; 12];
            for b in 0..4 {
                for row in 0..3 {
                    let mut acc = 0.0;
                    for col in 0..3 {
                        acc += m[(row, col)] * v[3 * b + col];
                    }
                    out[3 * b + row] = acc;
                }
            }
            out
        };

        let r_t = r.transpose();
        let unrotated = rot(&r_t, &x);
        let mut d = [0.0f64; 12];
        for i in 0..12 {
            d[i] = unrotated[i] - el.rest[i];
        }
        let mut kd = [0.0f64; 12];
        for row in 0..12 {
            let mut acc = 0.0;
            for col in 0..12 {
                acc += el.ke[(row, col)] * d[col];
            }
            kd[row] = acc;
        }
        let fe = rot(&r, &kd);
        for (i, &v) in el.tet.iter().enumerate() {
            for a in 0..3 {
                f_int[3 * v + a] += fe[3 * i + a];
            }
        }

        if let Some(k) = tangent.as_deref_mut() {
            // K_e warped: (R block) K_e (R block)^T.
            let mut warped = SMatrix::<f64, 12, 12>::zeros();
            for bi in 0..4 {
                for bj in 0..4 {
                    let mut block = Matrix3::<f64>::zeros();
                    for a in 0..3 {
                        for b in 0..3 {
                            block[(a, b)] = el.ke[(3 * bi + a, 3 * bj + b)];
                        }
                    }
                    let w = r * block * r_t;
                    for a in 0..3 {
                        for b in 0..3 {
                            warped[(3 * bi + a, 3 * bj + b)] = w[(a, b)];
                        }
                    }
                }
            }
            for (i, &vi) in el.tet.iter().enumerate() {
                for (j, &vj) in el.tet.iter().enumerate() {
                    for a in 0..3 {
                        for b in 0..3 {
                            k.add(3 * vi + a, 3 * vj + b, warped[(3 * i + a, 3 * j + b)]);
                        }
                    }
                }
            }
        }
    }
}

/// Solves the corotational equilibrium under Dirichlet constraints (dof ->
/// prescribed displacement); free dofs carry zero external force. Returns
/// the full displacement vector.
pub fn solve_corotational(
    mesh: &TetMesh,
    material: &Material,
    constraints: &BTreeMap<usize, f64>,
    settings: &NewtonSettings,
) -> Result<(Vec<f64>, NewtonReport)> {
    let n_dofs = 3 * mesh.vertex_count();
    for (&dof, &val) in constraints {
        if dof >= n_dofs {
            return Err(Error::IndexOutOfRange {
                op: "solve_corotational constraint",
                index: dof,
                len: n_dofs,
            });
        }
        if !val.is_finite() {
            return Err(Error::invalid(format!(
                "prescribed value for dof {dof} is not finite"
            )));
        }
    }
    if constraints.len() < 6 {
        return Err(Error::TooFewConstraints {
            needed: 6,
            got: constraints.len(),
        });
    }
    if settings.load_steps == 0 {
        return Err(Error::invalid("solve_corotational: load_steps must be >= 1"));
    }

    let elements = prepare_elements(mesh, material)?;
    let free: Vec<usize> = (0..n_dofs).filter(|d| !constraints.contains_key(d)).collect();
    let mut tangent = CsrMatrix::from_pattern(n_dofs, n_dofs, dof_pattern(mesh));
    let mut f_int = vec![0.0; n_dofs];
    let mut u = vec![0.0; n_dofs];

    // Absolute floor below which the residual counts as converged even if
    // the step started at (numerically) zero.
    let scale = material.youngs_modulus * mesh.diameter().max(1.0);
    let floor = 1e-12 * scale;

    let mut total_newton = 0usize;
    let mut final_residual = 0.0;

    for step in 1..=settings.load_steps {
        let ramp = step as f64 / settings.load_steps as f64;
        for (&dof, &val) in constraints {
            u[dof] = ramp * val;
        }

        let mut ref_norm: Option<f64> = None;
        let mut converged = free.is_empty();
        let mut step_iterations = 0usize;
        while !converged {
            assemble_state(&elements, &u, &mut f_int, Some(&mut tangent));
            let residual: Vec<f64> = free.iter().map(|&d| f_int[d]).collect();
            let r_norm = norm(&residual);
            let reference = *ref_norm.get_or_insert(r_norm);
            final_residual = if reference > 0.0 { r_norm / reference } else { 0.0 };
            if r_norm <= settings.tol * reference || r_norm <= floor {
                converged = true;
                break;
            }
            if step_iterations == settings.max_iterations {
                return Err(Error::NewtonDidNotConverge {
                    iterations: total_newton,
                    residual: final_residual,
                });
            }

            let kff = tangent.submatrix(&free);
            let rhs: Vec<f64> = residual.iter().map(|&v| -v).collect();
            let cg = CgSettings {
                tol: settings.linear.cg_tol,
                max_iter: settings.linear.max_iterations.unwrap_or(10 * n_dofs),
            };
            let outcome = jacobi_pcg(&kff, &rhs, cg)?;
            for (i, &dof) in free.iter().enumerate() {
                u[dof] += outcome.x[i];
            }
            step_iterations += 1;
            total_newton += 1;
        }
    }

    Ok((
        u,
        NewtonReport {
            newton_iterations: total_newton,
            final_residual,
        },
    ))
}
