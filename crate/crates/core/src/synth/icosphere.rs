//! Subdivided icosahedron surface meshes and layered-ball tetrahedral
//! meshes built from them.
//!
//! A layered ball stacks scaled copies of one icosphere (the shells), plus
//! a center vertex. Consecutive shells are connected by triangular prisms,
//! each split into three tetrahedra with the minimum-vertex-index diagonal
//! rule so shared quadrilateral faces are split identically on both sides;
//! the innermost shell closes with a fan of tetrahedra to the center.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mesh::TetMesh;

/// Unit icosphere: vertices on the unit sphere plus triangle indices.
#[derive(Debug, Clone)]
pub struct SurfaceSphere {
    pub directions: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl SurfaceSphere {
    pub fn vertex_count(&self) -> usize {
        self.directions.len()
    }
}

fn normalize(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}

/// Icosahedron subdivided `subdivisions` times; every vertex is normalized
/// onto the unit sphere. Vertex count is `10 * 4^s + 2`.
pub fn icosphere(subdivisions: usize) -> SurfaceSphere {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut directions: Vec<[f64; 3]> = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalize)
    .collect();
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for &[a, b, c] in &triangles {
            let mut mid = |u: usize, v: usize, dirs: &mut Vec<[f64; 3]>| -> usize {
                let key = (u.min(v), u.max(v));
                *midpoint.entry(key).or_insert_with(|| {
                    let p = [
                        dirs[u][0] + dirs[v][0],
                        dirs[u][1] + dirs[v][1],
                        dirs[u][2] + dirs[v][2],
                    ];
                    dirs.push(normalize(p));
                    dirs.len() - 1
                })
            };
            let ab = mid(a, b, &mut directions);
            let bc = mid(b, c, &mut directions);
            let ca = mid(c, a, &mut directions);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        triangles = next;
    }

    SurfaceSphere {
        directions,
        triangles,
    }
}

/// Splits the prism with bottom triangle `(b0, b1, b2)` and matching top
/// triangle `(t0, t1, t2)` into three tetrahedra. The face diagonals pass
/// through each quad face's smallest global vertex index, which makes the
/// split identical from both prisms sharing a face.
pub(crate) fn split_prism(bottom: [usize; 3], top: [usize; 3]) -> [[usize; 4]; 3] {
    // Rotate so that the prism's smallest vertex index sits at corner 0.
    let mut start = 0;
    let mut best = usize::MAX;
    for i in 0..3 {
        let m = bottom[i].min(top[i]);
        if m < best {
            best = m;
            start = i;
        }
    }
    let b = [
        bottom[start],
        bottom[(start + 1) % 3],
        bottom[(start + 2) % 3],
    ];
    let t = [top[start], top[(start + 1) % 3], top[(start + 2) % 3]];

    // Corner 0 column holds the global minimum, so both quad faces adjacent
    // to it take diagonals through that vertex. Name v1 = min(b[0], t[0]);
    // for a layered ball b[0] < t[0] always, but the rule is kept general.
    if b[0] <= t[0] {
        // Diagonals b0-t1 and b0-t2 on the adjacent faces; the far face
        // (b1, b2, t2, t1) splits through its own smallest index.
        if b[1].min(t[2]) < b[2].min(t[1]) {
            [
                [b[0], b[1], b[2], t[2]],
                [b[0], b[1], t[2], t[1]],
                [b[0], t[1], t[2], t[0]],
            ]
        } else {
            [
                [b[0], b[1], b[2], t[1]],
                [b[0], t[1], b[2], t[2]],
                [b[0], t[1], t[2], t[0]],
            ]
        }
    } else {
        // Mirrored case (top corner is the global minimum): the same rule
        // with bottom and top swapped.
        if t[1].min(b[2]) < t[2].min(b[1]) {
            [
                [t[0], t[1], t[2], b[2]],
                [t[0], t[1], b[2], b[1]],
                [t[0], b[1], b[2], b[0]],
            ]
        } else {
            [
                [t[0], t[1], t[2], b[1]],
                [t[0], b[1], t[2], b[2]],
                [t[0], b[1], b[2], b[0]],
            ]
        }
    }
}

/// Builds a tetrahedral ball of `shells` concentric icosphere layers plus a
/// center vertex. Vertex `k * V_s + i` (for shell `k = 0` innermost to
/// `shells - 1` outermost) sits at `radius(dir_i) * (k + 1) / shells` along
/// `dir_i`; the center vertex is last. `radius` must be positive.
pub fn layered_ball(
    subdivisions: usize,
    shells: usize,
    radius: impl Fn(&[f64; 3]) -> f64,
) -> Result<TetMesh> {
    if shells < 2 {
        return Err(Error::invalid("layered_ball: need at least 2 shells"));
    }
    let sphere = icosphere(subdivisions);
    let vs = sphere.vertex_count();

    let mut vertices = Vec::with_capacity(shells * vs + 1);
    for k in 0..shells {
        let t = (k + 1) as f64 / shells as f64;
        for dir in &sphere.directions {
            let r = radius(dir);
            if !(r > 0.0) {
                return Err(Error::invalid(format!(
                    "layered_ball: radius must be positive, got {r}"
                )));
            }
            vertices.push([dir[0] * r * t, dir[1] * r * t, dir[2] * r * t]);
        }
    }
    let center = vertices.len();
    vertices.push([0.0, 0.0, 0.0]);

    let mut tets = Vec::with_capacity(sphere.triangles.len() * (3 * (shells - 1) + 1));
    // Innermost shell fans to the center.
    for &[a, b, c] in &sphere.triangles {
        tets.push([center, a, b, c]);
    }
    // Prism layers between consecutive shells.
    for k in 0..shells - 1 {
        let lo = k * vs;
        let hi = (k + 1) * vs;
        for &[a, b, c] in &sphere.triangles {
            let bottom = [lo + a, lo + b, lo + c];
            let top = [hi + a, hi + b, hi + c];
            tets.extend_from_slice(&split_prism(bottom, top));
        }
    }

    TetMesh::new(vertices, tets)
}

/// `(subdivisions, shells)` whose layered ball has vertex count closest to
/// `target`; ties prefer the smaller mesh.
pub fn pick_resolution(target: usize) -> (usize, usize) {
    let mut best = (2usize, 2usize);
    let mut best_key = (usize::MAX, usize::MAX);
    for subdiv in 2..=3usize {
        let per_shell = 10 * 4usize.pow(subdiv as u32) + 2;
        for shells in 2..=7usize {
            let v = shells * per_shell + 1;
            let diff = v.abs_diff(target);
            if (diff, v) < best_key {
                best_key = (diff, v);
                best = (subdiv, shells);
            }
        }
    }
    best
}
