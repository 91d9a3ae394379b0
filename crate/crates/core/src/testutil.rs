//! Shared helpers for unit tests.

use crate::mesh::TetMesh;

/// Axis-aligned bar of `nx * ny * nz` unit cubes, each split into six
/// tetrahedra around the main diagonal (Kuhn subdivision), which conforms
/// across cube faces.
pub(crate) fn bar_mesh(nx: usize, ny: usize, nz: usize) -> TetMesh {
    let idx = |i: usize, j: usize, k: usize| (i * (ny + 1) + j) * (nz + 1) + k;
    let mut vertices = Vec::new();
    for i in 0..=nx {
        for j in 0..=ny {
            for k in 0..=nz {
                vertices.push([i as f64, j as f64, k as f64]);
            }
        }
    }
    // Each monotone path from (0,0,0) to (1,1,1) yields one tetrahedron.
    let paths: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                for path in &paths {
                    let mut corner = [0usize; 3];
                    let mut tet = [idx(i, j, k); 4];
                    for (step, &axis) in path.iter().enumerate() {
                        corner[axis] = 1;
                        tet[step + 1] = idx(i + corner[0], j + corner[1], k + corner[2]);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    TetMesh::new(vertices, tets).expect("bar mesh is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_mesh_volume_and_counts() {
        let mesh = bar_mesh(2, 1, 3);
        assert_eq!(mesh.vertex_count(), 3 * 2 * 4);
        assert_eq!(mesh.tets.len(), 6 * 2 * 3);
        let total: f64 = (0..mesh.tets.len()).map(|t| mesh.tet_volume(t)).sum();
        assert!((total - 6.0).abs() < 1e-12, "total volume {total}");
    }

    #[test]
    fn bar_mesh_surface_is_outer_shell() {
        let mesh = bar_mesh(2, 2, 2);
        // the single interior vertex of a 2x2x2 bar is not on the surface
        let on_surface = mesh
            .vertices
            .iter()
            .map(|v| {
                v.iter()
                    .any(|&c| c == 0.0 || c == 2.0)
            })
            .collect::<Vec<_>>();
        assert_eq!(mesh.surface_vertex_mask, on_surface);
    }
}
