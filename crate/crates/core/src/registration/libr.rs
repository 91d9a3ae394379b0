//! Linearized iterative boundary reconstruction (LIBR): an orthonormal
//! linear-elastic deformation basis plus iterative estimation of basis
//! weights from sparse intraoperative measurements.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, solve_displacement, Material, SolveSettings};
use crate::mesh::io::{atomic_write_json, read_json, FORMAT_VERSION};
use crate::mesh::knn;
use crate::mesh::{SparseMeasurement, TetMesh};

/// Orthonormal basis of volumetric displacement fields.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationBasis {
    pub n_vertices: usize,
    /// Row-major `(3 * n_vertices) x k` matrix of basis modes.
    pub modes: Vec<f64>,
    pub k: usize,
    /// Surface vertex index that seeded each triplet of raw modes.
    pub control_points: Vec<usize>,
    pub orthonormal: bool,
}

impl DeformationBasis {
    pub fn n_dofs(&self) -> usize {
        3 * self.n_vertices
    }

    #[inline]
    fn entry(&self, row: usize, col: usize) -> f64 {
        self.modes[row * self.k + col]
    }

    /// Displacement field `modes * weights` (length `3 * n_vertices`).
    pub fn apply(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.k {
            return Err(Error::ShapeMismatch {
                op: "DeformationBasis::apply",
                expected: format!("{} weights", self.k),
                got: format!("{}", weights.len()),
            });
        }
        let mut out = vec![0.0; self.n_dofs()];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.modes[r * self.k..(r + 1) * self.k];
            *o = row.iter().zip(weights).map(|(m, w)| m * w).sum();
        }
        Ok(out)
    }

    /// `max |modes' modes - I|`, zero for a perfectly orthonormal basis.
    pub fn gram_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.k {
            for j in i..self.k {
                let mut dot = 0.0;
                for r in 0..self.n_dofs() {
                    dot += self.entry(r, i) * self.entry(r, j);
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Parameters for basis construction. `radius` and `perturb_magnitude`
/// default to diameter/6 and diameter/50 when unset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibrBasisOptions {
    pub n_control: usize,
    pub radius: Option<f64>,
    pub perturb_magnitude: Option<f64>,
    /// Fraction of surface vertices (lowest z) held fixed as the support
    /// patch during mode solves.
    pub support_fraction: f64,
    pub cg_tol: f64,
    pub cg_max_iterations: Option<usize>,
}

impl Default for LibrBasisOptions {
    fn default() -> Self {
        LibrBasisOptions {
            n_control: 27,
            radius: None,
            perturb_magnitude: None,
            support_fraction: 0.10,
            cg_tol: 1e-8,
            cg_max_iterations: None,
        }
    }
}

/// Farthest-point sampling over surface vertices with Euclidean distances,
/// seeded at the lowest-index surface vertex; ties resolve to the lower
/// vertex index.
pub fn farthest_point_sample(mesh: &TetMesh, n: usize) -> Result<Vec<usize>> {
    let surface = mesh.surface_vertices();
    if n == 0 {
        return Err(Error::invalid("farthest-point sample size must be >= 1"));
    }
    if n > surface.len() {
        return Err(Error::invalid(format!(
            "requested {n} control points but the surface has only {} vertices",
            surface.len()
        )));
    }
    let mut chosen = vec![surface[0]];
    let mut min_d2: Vec<f64> = surface
        .iter()
        .map(|&v| crate::mesh::dist2(&mesh.vertices[v], &mesh.vertices[surface[0]]))
        .collect();
    while chosen.len() < n {
        let mut best = 0;
        for (i, &d2) in min_d2.iter().enumerate() {
            if d2 > min_d2[best] {
                best = i;
            }
        }
        let v = surface[best];
        chosen.push(v);
        for (i, &sv) in surface.iter().enumerate() {
            let d2 = crate::mesh::dist2(&mesh.vertices[sv], &mesh.vertices[v]);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }
    Ok(chosen)
}

/// Lowest-z fraction of surface vertices, used as the fixed support patch.
/// At least two vertices are returned so the reduced system stays
/// well-posed.
pub fn support_patch(mesh: &TetMesh, fraction: f64) -> Vec<usize> {
    let mut surface = mesh.surface_vertices();
    surface.sort_by(|&a, &b| {
        mesh.vertices[a][2]
            .partial_cmp(&mesh.vertices[b][2])
            .unwrap()
            .then(a.cmp(&b))
    });
    let count = ((surface.len() as f64) * fraction).ceil() as usize;
    surface.truncate(count.clamp(2, surface.len()));
    surface
}

/// Raw (pre-orthonormalization) mode fields: one localized Gaussian
/// perturbation solve per control point per Cartesian axis, in control-major
/// axis-minor column order.
pub(crate) fn build_raw_modes(
    preop: &TetMesh,
    material: &Material,
    options: &LibrBasisOptions,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let control_points = farthest_point_sample(preop, options.n_control)?;
    let diameter = preop.diameter();
    let radius = options.radius.unwrap_or(diameter / 6.0);
    let magnitude = options.perturb_magnitude.unwrap_or(diameter / 50.0);
    if !(radius > 0.0 && magnitude > 0.0) {
        return Err(Error::invalid(format!(
            "basis radius and perturbation magnitude must be positive, got {radius} and {magnitude}"
        )));
    }
    let sigma = radius / 2.0;
    let support = support_patch(preop, options.support_fraction);
    let system = assemble_stiffness(preop, material)?;
    let settings = SolveSettings {
        cg_tol: options.cg_tol,
        max_iterations: options.cg_max_iterations,
        ..Default::default()
    };

    let columns: Result<Vec<Vec<Vec<f64>>>> = control_points
        .par_iter()
        .map(|&cp| {
            let per_control = (|| -> Result<Vec<Vec<f64>>> {
                let geo = preop.surface_geodesic(&[cp])?;
                let mut fields = Vec::with_capacity(3);
                for axis in 0..3 {
                    let mut constraints: BTreeMap<usize, f64> = BTreeMap::new();
                    for &v in &support {
                        for a in 0..3 {
                            constraints.insert(3 * v + a, 0.0);
                        }
                    }
                    // The Gaussian perturbation overrides the support patch
                    // where the neighborhood overlaps it.
                    for (v, &d) in geo.iter().enumerate() {
                        if d <= radius {
                            let g = (-d * d / (2.0 * sigma * sigma)).exp();
                            for a in 0..3 {
                                let val = if a == axis { g * magnitude } else { 0.0 };
                                constraints.insert(3 * v + a, val);
                            }
                        }
                    }
                    let forces = vec![0.0; system.n_dofs()];
                    let report = solve_displacement(&system, &constraints, &forces, &settings)?;
                    fields.push(report.u);
                }
                Ok(fields)
            })();
            per_control.map_err(|e| Error::BasisSolve {
                control_point: cp,
                source: Box::new(e),
            })
        })
        .collect();
    let columns = columns?;
    Ok((columns.into_iter().flatten().collect(), control_points))
}

/// Builds the orthonormal deformation basis: localized perturbation solves
/// followed by thin-SVD orthonormalization. Columns with singular value
/// below `1e-10 * sigma_max` are dropped.
pub fn libr_build_basis(
    preop: &TetMesh,
    material: &Material,
    options: &LibrBasisOptions,
) -> Result<DeformationBasis> {
    let (raw, control_points) = build_raw_modes(preop, material, options)?;
    let n_dofs = 3 * preop.vertex_count();
    let n_raw = raw.len();
    let m = DMatrix::<f64>::from_fn(n_dofs, n_raw, |r, c| raw[c][r]);
    let svd = m.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().cloned().fold(0.0f64, f64::max);
    if sigma_max == 0.0 {
        return Err(Error::DegenerateConfiguration {
            context: "all deformation modes are zero".to_string(),
        });
    }
    let kept: Vec<usize> = (0..sigma.len())
        .filter(|&i| sigma[i] >= 1e-10 * sigma_max)
        .collect();
    let k = kept.len();
    let mut modes = vec![0.0; n_dofs * k];
    for (col, &src) in kept.iter().enumerate() {
        for r in 0..n_dofs {
            modes[r * k + col] = u[(r, src)];
        }
    }
    Ok(DeformationBasis {
        n_vertices: preop.vertex_count(),
        modes,
        k,
        control_points,
        orthonormal: true,
    })
}

/// Ridge-regularized least-squares fit of basis weights to matched
/// measurement points. `matches` pairs a measurement index with the preop
/// vertex it corresponds to. When `reg_lambda` is `None`, the scale-aware
/// default `1e-6 * trace(normal matrix) / k` is used.
pub fn solve_weights(
    basis: &DeformationBasis,
    preop: &TetMesh,
    matches: &[(usize, usize)],
    points: &[[f64; 3]],
    reg_lambda: Option<f64>,
) -> Result<Vec<f64>> {
    let k = basis.k;
    if 3 * matches.len() < 6 {
        return Err(Error::TooFewConstraints {
            needed: 6,
            got: 3 * matches.len(),
        });
    }
    let mut normal = DMatrix::<f64>::zeros(k, k);
    let mut rhs = nalgebra::DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for &(m, v) in matches {
        if m >= points.len() {
            return Err(Error::IndexOutOfRange {
                op: "solve_weights measurement",
                index: m,
                len: points.len(),
            });
        }
        if v >= basis.n_vertices {
            return Err(Error::IndexOutOfRange {
                op: "solve_weights vertex",
                index: v,
                len: basis.n_vertices,
            });
        }
        for axis in 0..3 {
            let r = 3 * v + axis;
            row.copy_from_slice(&basis.modes[r * k..(r + 1) * k]);
            let target = points[m][axis] - preop.vertices[v][axis];
            for i in 0..k {
                rhs[i] += row[i] * target;
                for j in i..k {
                    normal[(i, j)] += row[i] * row[j];
                }
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            normal[(i, j)] = normal[(j, i)];
        }
    }
    let lambda = reg_lambda.unwrap_or_else(|| 1e-6 * normal.trace() / k as f64);
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "regularization must be non-negative and finite, got {lambda}"
        )));
    }
    for i in 0..k {
        normal[(i, i)] += lambda;
    }
    let chol = normal.cholesky().ok_or(Error::SingularSystem {
        context: "LIBR normal equations are singular".to_string(),
    })?;
    Ok(chol.solve(&rhs).iter().cloned().collect())
}

/// Options for the iterative reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibrOptions {
    /// Ridge term; `None` selects the scale-aware default per iteration.
    pub reg_lambda: Option<f64>,
    pub max_iter: usize,
    /// Stop when the weight-update norm falls below this.
    pub tol: f64,
}

impl Default for LibrOptions {
    fn default() -> Self {
        LibrOptions {
            reg_lambda: None,
            max_iter: 30,
            tol: 1e-6,
        }
    }
}

/// Result of the iterative reconstruction.
#[derive(Debug, Clone)]
pub struct LibrSolution {
    pub weights: Vec<f64>,
    pub deformed_mesh: TetMesh,
    pub iterations_used: usize,
    /// RMS distance (mm) between measurements and their matched deformed
    /// vertices at the final iterate.
    pub final_rms: f64,
}

/// Iterative boundary reconstruction: alternates nearest-deformed-surface-
/// vertex correspondence with a ridge-regularized weight fit until the
/// weight update is small or `max_iter` is reached.
pub fn libr_reconstruct(
    basis: &DeformationBasis,
    preop: &TetMesh,
    meas: &SparseMeasurement,
    options: &LibrOptions,
) -> Result<LibrSolution> {
    if basis.n_vertices != preop.vertex_count() {
        return Err(Error::ShapeMismatch {
            op: "libr_reconstruct",
            expected: format!("basis over {} vertices", preop.vertex_count()),
            got: format!("{}", basis.n_vertices),
        });
    }
    meas.validate()?;
    if options.max_iter == 0 {
        return Err(Error::invalid("LIBR max_iter must be at least 1"));
    }
    let surface = preop.surface_vertices();
    let mut weights = vec![0.0; basis.k];
    let mut displacement = vec![0.0; basis.n_dofs()];
    let mut iterations_used = 0;
    let mut matches: Vec<(usize, usize)> = Vec::with_capacity(meas.points.len());

    for _ in 0..options.max_iter {
        iterations_used += 1;
        let deformed_surface: Vec<[f64; 3]> = surface
            .iter()
            .map(|&v| {
                let p = preop.vertices[v];
                [
                    p[0] + displacement[3 * v],
                    p[1] + displacement[3 * v + 1],
                    p[2] + displacement[3 * v + 2],
                ]
            })
            .collect();
        let nn = knn(&meas.points, &deformed_surface, 1)?;
        matches.clear();
        matches.extend(nn.iter().enumerate().map(|(m, idx)| (m, surface[idx[0]])));

        let new_weights =
            solve_weights(basis, preop, &matches, &meas.points, options.reg_lambda)?;
        let delta: f64 = new_weights
            .iter()
            .zip(&weights)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        weights = new_weights;
        displacement = basis.apply(&weights)?;
        if delta < options.tol {
            break;
        }
    }

    let deformed_mesh = apply_deformation(preop, &displacement)?;
    let mut acc = 0.0;
    for &(m, v) in &matches {
        let p = deformed_mesh.vertices[v];
        let s = meas.points[m];
        acc += crate::mesh::dist2(&p, &s);
    }
    let final_rms = (acc / matches.len() as f64).sqrt();
    Ok(LibrSolution {
        weights,
        deformed_mesh,
        iterations_used,
        final_rms,
    })
}

/// Adds a displacement field to the mesh vertices. Topology, surface mask
/// and salient mask are preserved untouched.
pub fn apply_deformation(mesh: &TetMesh, displacement: &[f64]) -> Result<TetMesh> {
    let n_dofs = 3 * mesh.vertex_count();
    if displacement.len() != n_dofs {
        return Err(Error::ShapeMismatch {
            op: "apply_deformation",
            expected: format!("displacement of length {n_dofs}"),
            got: format!("{}", displacement.len()),
        });
    }
    let mut out = mesh.clone();
    for (v, p) in out.vertices.iter_mut().enumerate() {
        p[0] += displacement[3 * v];
        p[1] += displacement[3 * v + 1];
        p[2] += displacement[3 * v + 2];
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct BasisDoc {
    format_version: String,
    n_vertices: usize,
    k: usize,
    control_points: Vec<usize>,
    /// Row-major `(3 * n_vertices) x k`.
    modes: Vec<f64>,
    orthonormal: bool,
    material: (f64, f64),
    params: LibrBasisOptions,
}

/// Persists a basis checkpoint together with the material and builder
/// parameters that produced it.
pub fn save_basis(
    path: &Path,
    basis: &DeformationBasis,
    material: &Material,
    params: &LibrBasisOptions,
) -> Result<()> {
    atomic_write_json(
        path,
        &BasisDoc {
            format_version: FORMAT_VERSION.to_string(),
            n_vertices: basis.n_vertices,
            k: basis.k,
            control_points: basis.control_points.clone(),
            modes: basis.modes.clone(),
            orthonormal: basis.orthonormal,
            material: (material.youngs_modulus, material.poisson_ratio),
            params: *params,
        },
    )
}

/// Loads a basis checkpoint, returning the basis with the material and
/// builder parameters recorded alongside it.
pub fn load_basis(path: &Path) -> Result<(DeformationBasis, Material, LibrBasisOptions)> {
    let doc: BasisDoc = read_json(path)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "unsupported format_version {:?}, expected {FORMAT_VERSION:?}",
                doc.format_version
            ),
        });
    }
    if doc.modes.len() != 3 * doc.n_vertices * doc.k {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "mode matrix has {} entries, expected {}",
                doc.modes.len(),
                3 * doc.n_vertices * doc.k
            ),
        });
    }
    let material = Material::new(doc.material.0, doc.material.1)?;
    Ok((
        DeformationBasis {
            n_vertices: doc.n_vertices,
            modes: doc.modes,
            k: doc.k,
            control_points: doc.control_points,
            orthonormal: doc.orthonormal,
        },
        material,
        doc.params,
    ))
}
