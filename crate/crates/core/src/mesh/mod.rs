//! Tetrahedral mesh representation, surface classification, neighbor queries
//! and the graph constructions used by the residual network.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod graph;
pub mod io;
mod knn;

pub use graph::{build_bipartite_graph, build_liver_graph, BipartiteGraph, LiverGraph, PseudoMode};
pub use knn::{downsample_points, knn};

/// Tetrahedral volume mesh. Vertex coordinates are in millimetres.
///
/// Construction normalizes tet orientation so that every signed volume is
/// positive and derives the surface mask from boundary-face incidence.
#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    pub vertices: Vec<[f64; 3]>,
    pub tets: Vec<[usize; 4]>,
    pub surface_vertex_mask: Vec<bool>,
    /// Marks the designated salient surface patch used for wICP weighting.
    pub salient_mask: Vec<bool>,
}

impl TetMesh {
    pub fn new(vertices: Vec<[f64; 3]>, tets: Vec<[usize; 4]>) -> Result<Self> {
        let mut mesh = TetMesh {
            surface_vertex_mask: vec![false; vertices.len()],
            salient_mask: vec![false; vertices.len()],
            vertices,
            tets,
        };
        mesh.normalize()?;
        let (_, mask) = extract_surface(&mesh)?;
        mesh.surface_vertex_mask = mask;
        Ok(mesh)
    }

    /// Reconstructs a persisted mesh without touching tet orientation.
    ///
    /// Registered (deformed) copies of a reference mesh must keep its tet
    /// array verbatim even where the deformation turns elements inside out,
    /// so the stored bytes round-trip exactly; `new` would silently flip
    /// such tets and break the shared-topology invariant.
    pub fn from_stored(vertices: Vec<[f64; 3]>, tets: Vec<[usize; 4]>) -> Result<Self> {
        let mut mesh = TetMesh {
            surface_vertex_mask: vec![false; vertices.len()],
            salient_mask: vec![false; vertices.len()],
            vertices,
            tets,
        };
        mesh.validate_tets()?;
        let (_, mask) = extract_surface(&mesh)?;
        mesh.surface_vertex_mask = mask;
        Ok(mesh)
    }

    fn validate_tets(&self) -> Result<()> {
        let nv = self.vertices.len();
        for (i, tet) in self.tets.iter().enumerate() {
            for &v in tet.iter() {
                if v >= nv {
                    return Err(Error::TetIndexOutOfRange {
                        index: i,
                        vertex: v,
                        vertex_count: nv,
                    });
                }
            }
            let t = *tet;
            if t[0] == t[1]
                || t[0] == t[2]
                || t[0] == t[3]
                || t[1] == t[2]
                || t[1] == t[3]
                || t[2] == t[3]
            {
                return Err(Error::RepeatedTetVertex { index: i, tet: t });
            }
        }
        Ok(())
    }

    /// Validates indices and flips tets with negative signed volume.
    fn normalize(&mut self) -> Result<()> {
        self.validate_tets()?;
        for (i, tet) in self.tets.iter_mut().enumerate() {
            let t = *tet;
            let vol = signed_volume(
                &self.vertices[t[0]],
                &self.vertices[t[1]],
                &self.vertices[t[2]],
                &self.vertices[t[3]],
            );
            if vol < 0.0 {
                tet.swap(2, 3);
            } else if vol == 0.0 {
                return Err(Error::DegenerateTet {
                    index: i,
                    volume: vol,
                });
            }
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn tet_volume(&self, i: usize) -> f64 {
        let t = self.tets[i];
        signed_volume(
            &self.vertices[t[0]],
            &self.vertices[t[1]],
            &self.vertices[t[2]],
            &self.vertices[t[3]],
        )
    }

    /// Largest pairwise vertex distance.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.vertices.len() {
            for j in (i + 1)..self.vertices.len() {
                let d = dist2(&self.vertices[i], &self.vertices[j]);
                if d > best {
                    best = d;
                }
            }
        }
        best.sqrt()
    }

    pub fn surface_vertices(&self) -> Vec<usize> {
        self.surface_vertex_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    /// Checks that `other` shares this mesh's tets and vertex count, naming
    /// the first differing tet otherwise.
    pub fn check_same_topology(&self, other: &TetMesh) -> Result<()> {
        if self.vertices.len() != other.vertices.len() {
            return Err(Error::TopologyMismatch {
                detail: format!(
                    "vertex counts differ: {} vs {}",
                    self.vertices.len(),
                    other.vertices.len()
                ),
            });
        }
        if self.tets.len() != other.tets.len() {
            return Err(Error::TopologyMismatch {
                detail: format!("tet counts differ: {} vs {}", self.tets.len(), other.tets.len()),
            });
        }
        for (i, (a, b)) in self.tets.iter().zip(other.tets.iter()).enumerate() {
            if a != b {
                return Err(Error::TopologyMismatch {
                    detail: format!("tet {i} differs: {a:?} vs {b:?}"),
                });
            }
        }
        Ok(())
    }

    /// Undirected 1-skeleton edges, sorted by `(min_vertex, max_vertex)`.
    pub fn undirected_edges(&self) -> Vec<[usize; 2]> {
        let mut set = std::collections::BTreeSet::new();
        for tet in &self.tets {
            for (a, b) in [
                (tet[0], tet[1]),
                (tet[0], tet[2]),
                (tet[0], tet[3]),
                (tet[1], tet[2]),
                (tet[1], tet[3]),
                (tet[2], tet[3]),
            ] {
                set.insert([a.min(b), a.max(b)]);
            }
        }
        set.into_iter().collect()
    }

    /// Adjacency between surface vertices through boundary-triangle edges.
    pub fn surface_adjacency(&self) -> Result<Vec<Vec<usize>>> {
        let (faces, _) = extract_surface(self)?;
        let mut adj: Vec<std::collections::BTreeSet<usize>> =
            vec![std::collections::BTreeSet::new(); self.vertices.len()];
        for f in &faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        Ok(adj.into_iter().map(|s| s.into_iter().collect()).collect())
    }

    /// Geodesic distance from the given source surface vertices to every
    /// vertex, measured along surface edges (Dijkstra with Euclidean edge
    /// lengths). Interior and unreachable vertices get `INFINITY`.
    pub fn surface_geodesic(&self, sources: &[usize]) -> Result<Vec<f64>> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        let adj = self.surface_adjacency()?;
        let n = self.vertices.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut heap: BinaryHeap<Reverse<(OrdF64, usize)>> = BinaryHeap::new();
        for &s in sources {
            if s >= n {
                return Err(Error::IndexOutOfRange {
                    op: "surface_geodesic source",
                    index: s,
                    len: n,
                });
            }
            if !self.surface_vertex_mask[s] {
                return Err(Error::invalid(format!(
                    "surface_geodesic source {s} is not a surface vertex"
                )));
            }
            dist[s] = 0.0;
            heap.push(Reverse((OrdF64(0.0), s)));
        }
        while let Some(Reverse((OrdF64(d), v))) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            for &u in &adj[v] {
                let cand = d + dist2(&self.vertices[v], &self.vertices[u]).sqrt();
                if cand < dist[u] {
                    dist[u] = cand;
                    heap.push(Reverse((OrdF64(cand), u)));
                }
            }
        }
        Ok(dist)
    }

    /// Distance from a point to the mesh boundary surface.
    pub fn surface_distance(&self, p: &[f64; 3], faces: &[[usize; 3]]) -> f64 {
        let mut best = f64::INFINITY;
        for f in faces {
            let d = point_triangle_distance(
                p,
                &self.vertices[f[0]],
                &self.vertices[f[1]],
                &self.vertices[f[2]],
            );
            if d < best {
                best = d;
            }
        }
        best
    }
}

/// Total order on finite doubles for use in the Dijkstra heap.
#[derive(PartialEq, PartialOrd)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("distances are never NaN")
    }
}

/// Signed volume of the tetrahedron `(a, b, c, d)`.
pub fn signed_volume(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3], d: &[f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let w = [d[0] - a[0], d[1] - a[1], d[2] - a[2]];
    (u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
        + u[2] * (v[0] * w[1] - v[1] * w[0]))
        / 6.0
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Boundary triangles and the surface-vertex mask.
///
/// A face is boundary iff it belongs to exactly one tet. Faces shared by more
/// than two tets make the input non-manifold. Boundary triangles keep the
/// outward orientation inherited from their tet and are returned sorted by
/// their sorted vertex triple.
pub fn extract_surface(mesh: &TetMesh) -> Result<(Vec<[usize; 3]>, Vec<bool>)> {
    // key: sorted triple, value: (count, oriented face)
    let mut faces: BTreeMap<[usize; 3], (usize, [usize; 3])> = BTreeMap::new();
    for tet in &mesh.tets {
        let [a, b, c, d] = *tet;
        // outward-facing for a positively oriented tet
        for f in [[b, c, d], [a, c, b], [a, b, d], [a, d, c]] {
            let mut key = f;
            key.sort_unstable();
            let entry = faces.entry(key).or_insert((0, f));
            entry.0 += 1;
        }
    }
    let mut boundary = Vec::new();
    let mut mask = vec![false; mesh.vertices.len()];
    for (key, (count, oriented)) in &faces {
        match count {
            1 => {
                boundary.push(*oriented);
                for &v in key {
                    mask[v] = true;
                }
            }
            2 => {}
            n => {
                return Err(Error::NonManifoldFace {
                    face: *key,
                    count: *n,
                })
            }
        }
    }
    Ok((boundary, mask))
}

/// Intraoperative sparse measurement point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMeasurement {
    pub points: Vec<[f64; 3]>,
    pub tags: Vec<SourceTag>,
    pub weights: Vec<f64>,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SourceTag {
    Surface,
    UsPlane(u32),
}

impl From<SourceTag> for String {
    fn from(t: SourceTag) -> String {
        match t {
            SourceTag::Surface => "surface".to_string(),
            SourceTag::UsPlane(k) => format!("us_plane_{k}"),
        }
    }
}

impl TryFrom<String> for SourceTag {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "surface" {
            return Ok(SourceTag::Surface);
        }
        if let Some(rest) = s.strip_prefix("us_plane_") {
            return rest
                .parse::<u32>()
                .map(SourceTag::UsPlane)
                .map_err(|e| format!("bad plane index in {s:?}: {e}"));
        }
        Err(format!("unknown source tag {s:?}"))
    }
}

impl SparseMeasurement {
    pub fn new(
        points: Vec<[f64; 3]>,
        tags: Vec<SourceTag>,
        weights: Vec<f64>,
        noise_sigma: f64,
    ) -> Result<Self> {
        let m = SparseMeasurement {
            points,
            tags,
            weights,
            noise_sigma,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyInput("measurement points"));
        }
        if self.tags.len() != self.points.len() || self.weights.len() != self.points.len() {
            return Err(Error::invalid(format!(
                "measurement field lengths differ: {} points, {} tags, {} weights",
                self.points.len(),
                self.tags.len(),
                self.weights.len()
            )));
        }
        for w in &self.weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::invalid(format!("bad measurement weight {w}")));
            }
        }
        for p in &self.points {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid("non-finite measurement coordinate"));
            }
        }
        // us-plane indices must be contiguous from 0
        let mut planes: Vec<u32> = self
            .tags
            .iter()
            .filter_map(|t| match t {
                SourceTag::UsPlane(k) => Some(*k),
                SourceTag::Surface => None,
            })
            .collect();
        planes.sort_unstable();
        planes.dedup();
        for (i, k) in planes.iter().enumerate() {
            if *k as usize != i {
                return Err(Error::invalid(format!(
                    "us-plane indices not contiguous from 0: {planes:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Closest distance between a point and a triangle (Ericson's region test).
pub fn point_triangle_distance(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    let sub = |x: &[f64; 3], y: &[f64; 3]| [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
    let dot = |x: &[f64; 3], y: &[f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];

    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return dist2(p, a).sqrt();
    }

    let bp = sub(p, b);
    let d3 = dot(&ab, &bp);
    let d4 = dot(&ac, &bp);
    if d3 >= 0.0 && d4 <= d3 {
        return dist2(p, b).sqrt();
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        let q = [a[0] + v * ab[0], a[1] + v * ab[1], a[2] + v * ab[2]];
        return dist2(p, &q).sqrt();
    }

    let cp = sub(p, c);
    let d5 = dot(&ab, &cp);
    let d6 = dot(&ac, &cp);
    if d6 >= 0.0 && d5 <= d6 {
        return dist2(p, c).sqrt();
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        let q = [a[0] + w * ac[0], a[1] + w * ac[1], a[2] + w * ac[2]];
        return dist2(p, &q).sqrt();
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let bc = sub(c, b);
        let q = [b[0] + w * bc[0], b[1] + w * bc[1], b[2] + w * bc[2]];
        return dist2(p, &q).sqrt();
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let q = [
        a[0] + v * ab[0] + w * ac[0],
        a[1] + v * ab[1] + w * ac[1],
        a[2] + v * ab[2] + w * ac[2],
    ];
    dist2(p, &q).sqrt()
}
