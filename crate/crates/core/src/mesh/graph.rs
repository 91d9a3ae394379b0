//! Construction of the liver-mesh graph and the measurement bipartite graph.
//!
//! Both graphs carry per-edge pseudo-coordinates in `[0, 1]` that
//! parameterize the spline convolution kernel. The default mode assigns a
//! canonical ordinal index; a relative-offset mode derives 3-D normalized
//! coordinate differences instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{knn, SparseMeasurement, TetMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    /// Edge ordinal in the canonical ordering, normalized to `[0, 1]`.
    /// Depends only on topology, so it is shared by all meshes of a geometry.
    #[default]
    CanonicalOrdinal,
    /// Normalized 3-D vertex-coordinate differences mapped into `[0, 1]^3`.
    RelativeOffset,
}

impl PseudoMode {
    pub fn dim(&self) -> usize {
        match self {
            PseudoMode::CanonicalOrdinal => 1,
            PseudoMode::RelativeOffset => 3,
        }
    }
}

/// Graph over the tet-mesh 1-skeleton with 6-wide vertex attributes
/// (preoperative coordinates concatenated with the physics-prior solution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiverGraph {
    /// Row-major `N_p x 6`.
    pub vertex_attrs: Vec<f64>,
    /// Directed edges `(src, dst)`; both directions of every skeleton edge.
    pub edges: Vec<[usize; 2]>,
    /// Row-major `E x pseudo_dim`, all values in `[0, 1]`.
    pub edge_attrs: Vec<f64>,
    pub pseudo_dim: usize,
}

impl LiverGraph {
    pub fn vertex_count(&self) -> usize {
        self.vertex_attrs.len() / 6
    }
}

/// Bipartite correspondence graph between measurement points (s-nodes) and
/// mesh vertices (v-nodes). No s-s or v-v edges exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BipartiteGraph {
    /// Row-major `N_s x 3`: measurement coordinates.
    pub s_attrs: Vec<f64>,
    /// Row-major `N_v x 3`: preoperative coordinates of the matched vertices.
    pub v_attrs: Vec<f64>,
    /// Mesh-vertex index per v-node, strictly increasing (deduplicated).
    pub v_indices: Vec<usize>,
    /// Edges as `(s, v_local)` pairs, s-major in neighbor-rank order.
    pub edges: Vec<[usize; 2]>,
    /// Row-major `E x pseudo_dim`, all values in `[0, 1]`.
    pub edge_attrs: Vec<f64>,
    pub pseudo_dim: usize,
}

impl BipartiteGraph {
    pub fn s_count(&self) -> usize {
        self.s_attrs.len() / 3
    }

    pub fn v_count(&self) -> usize {
        self.v_indices.len()
    }
}

fn ordinal_attr(ordinal: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else {
        ordinal as f64 / (count - 1) as f64
    }
}

/// Maps coordinate deltas into `[0,1]^3` using the largest absolute
/// component over all edges as the scale.
fn relative_offset_attrs(deltas: &[[f64; 3]]) -> Vec<f64> {
    let mut scale = 0.0f64;
    for d in deltas {
        for c in d {
            scale = scale.max(c.abs());
        }
    }
    if scale == 0.0 {
        scale = 1.0;
    }
    let mut out = Vec::with_capacity(deltas.len() * 3);
    for d in deltas {
        for c in d {
            out.push((0.5 + c / (2.0 * scale)).clamp(0.0, 1.0));
        }
    }
    out
}

/// Builds the liver-mesh graph from a preoperative mesh and its deformed
/// physics-prior counterpart. The two meshes must share topology.
pub fn build_liver_graph(preop: &TetMesh, libr: &TetMesh, mode: PseudoMode) -> Result<LiverGraph> {
    preop.check_same_topology(libr)?;

    let n = preop.vertex_count();
    let mut vertex_attrs = Vec::with_capacity(n * 6);
    for i in 0..n {
        vertex_attrs.extend_from_slice(&preop.vertices[i]);
        vertex_attrs.extend_from_slice(&libr.vertices[i]);
    }

    let undirected = preop.undirected_edges();
    let e = undirected.len();
    let mut edges = Vec::with_capacity(2 * e);
    let mut edge_attrs = Vec::with_capacity(2 * e * mode.dim());
    match mode {
        PseudoMode::CanonicalOrdinal => {
            for (ord, &[a, b]) in undirected.iter().enumerate() {
                let u = ordinal_attr(ord, e);
                edges.push([a, b]);
                edge_attrs.push(u);
                edges.push([b, a]);
                edge_attrs.push(u);
            }
        }
        PseudoMode::RelativeOffset => {
            let mut deltas = Vec::with_capacity(2 * e);
            for &[a, b] in &undirected {
                edges.push([a, b]);
                edges.push([b, a]);
                for (s, d) in [(a, b), (b, a)] {
                    deltas.push([
                        preop.vertices[d][0] - preop.vertices[s][0],
                        preop.vertices[d][1] - preop.vertices[s][1],
                        preop.vertices[d][2] - preop.vertices[s][2],
                    ]);
                }
            }
            edge_attrs = relative_offset_attrs(&deltas);
        }
    }

    Ok(LiverGraph {
        vertex_attrs,
        edges,
        edge_attrs,
        pseudo_dim: mode.dim(),
    })
}

/// Builds the bipartite graph connecting each measurement point to its
/// `n_top` nearest vertices of `corr_mesh`. v-node attributes are the
/// preoperative coordinates of the matched vertices.
pub fn build_bipartite_graph(
    meas: &SparseMeasurement,
    corr_mesh: &TetMesh,
    preop: &TetMesh,
    n_top: usize,
    mode: PseudoMode,
) -> Result<BipartiteGraph> {
    meas.validate()?;
    corr_mesh.check_same_topology(preop)?;
    if n_top == 0 {
        return Err(Error::invalid("build_bipartite_graph: n_top must be >= 1"));
    }

    let neighbors = knn(&meas.points, &corr_mesh.vertices, n_top)?;

    let mut v_indices: Vec<usize> = neighbors.iter().flatten().copied().collect();
    v_indices.sort_unstable();
    v_indices.dedup();
    let local_of = |mesh_v: usize| v_indices.binary_search(&mesh_v).unwrap();

    let mut edges = Vec::with_capacity(meas.len() * n_top);
    for (s, nbrs) in neighbors.iter().enumerate() {
        for &mesh_v in nbrs {
            edges.push([s, local_of(mesh_v)]);
        }
    }

    let edge_attrs = match mode {
        PseudoMode::CanonicalOrdinal => {
            let count = edges.len();
            (0..count).map(|ord| ordinal_attr(ord, count)).collect()
        }
        PseudoMode::RelativeOffset => {
            let deltas: Vec<[f64; 3]> = edges
                .iter()
                .map(|&[s, v]| {
                    let vm = corr_mesh.vertices[v_indices[v]];
                    let sp = meas.points[s];
                    [vm[0] - sp[0], vm[1] - sp[1], vm[2] - sp[2]]
                })
                .collect();
            relative_offset_attrs(&deltas)
        }
    };

    let mut s_attrs = Vec::with_capacity(meas.len() * 3);
    for p in &meas.points {
        s_attrs.extend_from_slice(p);
    }
    let mut v_attrs = Vec::with_capacity(v_indices.len() * 3);
    for &v in &v_indices {
        v_attrs.extend_from_slice(&preop.vertices[v]);
    }

    Ok(BipartiteGraph {
        s_attrs,
        v_attrs,
        v_indices,
        edges,
        edge_attrs,
        pseudo_dim: mode.dim(),
    })
}
