//! Linear-elastic finite elements on tetrahedral meshes.
//!
//! Constant-strain four-node tetrahedra with an isotropic Hooke material.
//! The global stiffness matrix is assembled in CSR form and constrained
//! systems are solved with a Jacobi-preconditioned conjugate gradient after
//! eliminating prescribed degrees of freedom.

pub mod sparse;

use std::collections::BTreeMap;

use nalgebra::{Matrix4, SMatrix};

use crate::error::{Error, Result};
use crate::mesh::TetMesh;
use sparse::{jacobi_pcg, CgSettings, CsrMatrix};

/// Isotropic linear-elastic material.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Material {
    /// Young's modulus (Pa).
    pub youngs_modulus: f64,
    /// Poisson's ratio, in (-1, 0.5).
    pub poisson_ratio: f64,
}

impl Material {
    pub fn new(youngs_modulus: f64, poisson_ratio: f64) -> Result<Self> {
        let m = Material {
            youngs_modulus,
            poisson_ratio,
        };
        m.validate()?;
        Ok(m)
    }

    /// Re-checks the constructor invariants (deserialized values skip them).
    pub fn validate(&self) -> Result<()> {
        if !(self.youngs_modulus.is_finite() && self.youngs_modulus > 0.0) {
            return Err(Error::invalid(format!(
                "Young's modulus must be positive and finite, got {}",
                self.youngs_modulus
            )));
        }
        if !(self.poisson_ratio.is_finite()
            && self.poisson_ratio > -1.0
            && self.poisson_ratio < 0.5)
        {
            return Err(Error::invalid(format!(
                "Poisson's ratio must lie in (-1, 0.5), got {}",
                self.poisson_ratio
            )));
        }
        Ok(())
    }

    /// Lamé parameters `(lambda, mu)`.
    pub fn lame(&self) -> (f64, f64) {
        let e = self.youngs_modulus;
        let nu = self.poisson_ratio;
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let mu = e / (2.0 * (1.0 + nu));
        (lambda, mu)
    }

    /// 6x6 constitutive matrix in Voigt order
    /// `(xx, yy, zz, xy, yz, zx)` with engineering shear strains.
    pub fn hooke(&self) -> SMatrix<f64, 6, 6> {
        let (lambda, mu) = self.lame();
        let mut d = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                d[(i, j)] = lambda;
            }
            d[(i, i)] += 2.0 * mu;
            d[(i + 3, i + 3)] = mu;
        }
        d
    }
}

/// Per-element geometry: signed volume and barycentric gradients.
///
/// `grads[i]` is the constant gradient of the i-th barycentric coordinate.
fn tet_geometry(verts: &[[f64; 3]; 4]) -> Result<(f64, [[f64; 3]; 4])> {
    let mut m = Matrix4::<f64>::zeros();
    for (i, v) in verts.iter().enumerate() {
        m[(i, 0)] = 1.0;
        m[(i, 1)] = v[0];
        m[(i, 2)] = v[1];
        m[(i, 3)] = v[2];
    }
    let volume = m.determinant() / 6.0;
    let mut h: f64 = 0.0;
    for i in 0..4 {
        for j in (i + 1)..4 {
            let d2 = (verts[i][0] - verts[j][0]).powi(2)
                + (verts[i][1] - verts[j][1]).powi(2)
                + (verts[i][2] - verts[j][2]).powi(2);
            h = h.max(d2.sqrt());
        }
    }
    if !(volume.is_finite()) || volume <= 1e-12 * h * h * h {
        return Err(Error::DegenerateTet { index: 0, volume });
    }
    let inv = m.try_inverse().ok_or(Error::DegenerateTet {
        index: 0,
        volume,
    })?;
    let mut grads = [[0.0; 3]; 4];
    for i in 0..4 {
        for k in 0..3 {
            // d lambda_i / d x_k
            grads[i][k] = inv[(k + 1, i)];
        }
    }
    Ok((volume, grads))
}

/// 6x12 strain-displacement matrix for a constant-strain tetrahedron.
fn strain_displacement(grads: &[[f64; 3]; 4]) -> SMatrix<f64, 6, 12> {
    let mut b = SMatrix::<f64, 6, 12>::zeros();
    for (i, g) in grads.iter().enumerate() {
        let c = 3 * i;
        let (bx, by, bz) = (g[0], g[1], g[2]);
        b[(0, c)] = bx;
        b[(1, c + 1)] = by;
        b[(2, c + 2)] = bz;
        // engineering shear strains
        b[(3, c)] = by;
        b[(3, c + 1)] = bx;
        b[(4, c + 1)] = bz;
        b[(4, c + 2)] = by;
        b[(5, c)] = bz;
        b[(5, c + 2)] = bx;
    }
    b
}

/// 12x12 stiffness of one constant-strain tetrahedron, `V * B' D B`,
/// symmetrized so that the assembled matrix is exactly symmetric.
pub fn element_stiffness(
    verts: &[[f64; 3]; 4],
    material: &Material,
) -> Result<SMatrix<f64, 12, 12>> {
    let (volume, grads) = tet_geometry(verts)?;
    let b = strain_displacement(&grads);
    let d = material.hooke();
    let mut k = b.transpose() * d * b * volume;
    let kt = k.transpose();
    k = (k + kt) * 0.5;
    Ok(k)
}

/// Assembled global stiffness over `3 * vertex_count` degrees of freedom.
/// Dof `3*v + a` is the displacement of vertex `v` along axis `a`.
#[derive(Debug, Clone)]
pub struct StiffnessSystem {
    pub n_vertices: usize,
    pub matrix: CsrMatrix,
}

impl StiffnessSystem {
    pub fn n_dofs(&self) -> usize {
        3 * self.n_vertices
    }

    /// All structurally non-zero entries as `(row, col, value)` triples,
    /// row-major; useful for debug dumps.
    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        let m = &self.matrix;
        let mut out = Vec::with_capacity(m.values.len());
        for r in 0..m.n_rows {
            for k in m.row_ptr[r]..m.row_ptr[r + 1] {
                out.push((r, m.col_idx[k], m.values[k]));
            }
        }
        out
    }
}

/// Sparsity pattern from vertex adjacency (3x3 dense blocks per edge plus
/// the diagonal blocks).
pub(crate) fn dof_pattern(mesh: &TetMesh) -> Vec<Vec<usize>> {
    let n = mesh.vertex_count();
    let mut adj: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n];
    for v in 0..n {
        adj[v].insert(v);
    }
    for tet in &mesh.tets {
        for &a in tet {
            for &b in tet {
                adj[a].insert(b);
            }
        }
    }
    let mut rows = Vec::with_capacity(3 * n);
    for v in 0..n {
        for _axis in 0..3 {
            let mut cols = Vec::with_capacity(3 * adj[v].len());
            for &u in &adj[v] {
                cols.extend_from_slice(&[3 * u, 3 * u + 1, 3 * u + 2]);
            }
            rows.push(cols);
        }
    }
    rows
}

/// Assembles the global stiffness matrix of a tetrahedral mesh.
pub fn assemble_stiffness(mesh: &TetMesh, material: &Material) -> Result<StiffnessSystem> {
    let n = mesh.vertex_count();
    let mut matrix = CsrMatrix::from_pattern(3 * n, 3 * n, dof_pattern(mesh));
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
        for (i, &vi) in tet.iter().enumerate() {
            for (j, &vj) in tet.iter().enumerate() {
                for a in 0..3 {
                    for b in 0..3 {
                        matrix.add(3 * vi + a, 3 * vj + b, ke[(3 * i + a, 3 * j + b)]);
                    }
                }
            }
        }
    }
    Ok(StiffnessSystem {
        n_vertices: n,
        matrix,
    })
}

/// Options for the constrained linear solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveSettings {
    /// Relative residual tolerance for conjugate gradient.
    pub cg_tol: f64,
    /// Iteration cap; `None` means ten times the number of dofs.
    pub max_iterations: Option<usize>,
    /// Tikhonov term added to the free-free diagonal. When set, the
    /// requirement of at least six constrained dofs is waived.
    pub regularization: Option<f64>,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            cg_tol: 1e-8,
            max_iterations: None,
            regularization: None,
        }
    }
}

/// Result of a constrained solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Full displacement vector (length `3 * n_vertices`), prescribed dofs
    /// hold their prescribed values exactly.
    pub u: Vec<f64>,
    pub cg_iterations: usize,
    pub relative_residual: f64,
}

/// Solves `K u = f` with Dirichlet constraints eliminated by reduction.
///
/// `constraints` maps dof index to its prescribed value. Without
/// regularization at least six dofs must be constrained, otherwise rigid
/// modes make the reduced system singular.
pub fn solve_displacement(
    system: &StiffnessSystem,
    constraints: &BTreeMap<usize, f64>,
    forces: &[f64],
    settings: &SolveSettings,
) -> Result<SolveReport> {
    let n_dofs = system.n_dofs();
    if forces.len() != n_dofs {
        return Err(Error::ShapeMismatch {
            op: "solve_displacement",
            expected: format!("force vector of length {n_dofs}"),
            got: format!("length {}", forces.len()),
        });
    }
    for (&dof, &val) in constraints {
        if dof >= n_dofs {
            return Err(Error::IndexOutOfRange {
                op: "solve_displacement constraint",
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
    if settings.regularization.is_none() && constraints.len() < 6 {
        return Err(Error::TooFewConstraints {
            needed: 6,
            got: constraints.len(),
        });
    }

    let free: Vec<usize> = (0..n_dofs).filter(|d| !constraints.contains_key(d)).collect();
    let mut u = vec![0.0; n_dofs];
    for (&dof, &val) in constraints {
        u[dof] = val;
    }
    if free.is_empty() {
        return Ok(SolveReport {
            u,
            cg_iterations: 0,
            relative_residual: 0.0,
        });
    }

    // rhs_f = f_free - K[free, constrained] * u_c
    let m = &system.matrix;
    let mut rhs: Vec<f64> = Vec::with_capacity(free.len());
    for &r in &free {
        let mut acc = forces[r];
        for k in m.row_ptr[r]..m.row_ptr[r + 1] {
            let c = m.col_idx[k];
            if let Some(&val) = constraints.get(&c) {
                acc -= m.values[k] * val;
            }
        }
        rhs.push(acc);
    }

    let mut kff = m.submatrix(&free);
    if let Some(eps) = settings.regularization {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::invalid(format!(
                "regularization must be non-negative and finite, got {eps}"
            )));
        }
        for r in 0..kff.n_rows {
            kff.add(r, r, eps);
        }
    }

    let cg = CgSettings {
        tol: settings.cg_tol,
        max_iter: settings.max_iterations.unwrap_or(10 * n_dofs),
    };
    let outcome = jacobi_pcg(&kff, &rhs, cg)?;
    for (i, &dof) in free.iter().enumerate() {
        u[dof] = outcome.x[i];
    }
    Ok(SolveReport {
        u,
        cg_iterations: outcome.iterations,
        relative_residual: outcome.relative_residual,
    })
}

/// Convenience: constrain all three dofs of each listed vertex to the given
/// displacement.
pub fn constrain_vertices(
    constraints: &mut BTreeMap<usize, f64>,
    vertices: &[usize],
    displacement: [f64; 3],
) {
    for &v in vertices {
        for a in 0..3 {
            constraints.insert(3 * v + a, displacement[a]);
        }
    }
}
