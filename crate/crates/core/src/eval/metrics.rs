//! Registration accuracy metrics (TRE and its surface/interior split).

use crate::error::Result;
use crate::mesh::TetMesh;

/// Per-vertex target registration error of one registered mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TreResult {
    /// Mean per-vertex error (mm).
    pub mean: f64,
    /// Population standard deviation of the per-vertex errors (mm).
    pub std: f64,
    /// Per-vertex Euclidean errors (mm), in mesh vertex order.
    pub per_vertex: Vec<f64>,
}

/// TRE restricted to vertex classes: `edge` over surface vertices, `inner`
/// over interior vertices. A class with no vertices is reported as `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreSplit {
    pub edge: Option<f64>,
    pub inner: Option<f64>,
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Target registration error: per-vertex Euclidean distance between a
/// registered mesh and the true deformed mesh, summarized over vertices.
pub fn tre(pred: &TetMesh, gt: &TetMesh) -> Result<TreResult> {
    pred.check_same_topology(gt)?;
    let per_vertex: Vec<f64> = pred
        .vertices
        .iter()
        .zip(&gt.vertices)
        .map(|(p, g)| {
            ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt()
        })
        .collect();
    let (mean, std) = mean_std(&per_vertex);
    Ok(TreResult {
        mean,
        std,
        per_vertex,
    })
}

/// Means of `per_vertex` over surface (`edge`) and interior (`inner`)
/// vertices according to `surface_mask`.
pub fn split_errors(per_vertex: &[f64], surface_mask: &[bool]) -> TreSplit {
    let mut edge_sum = 0.0;
    let mut edge_n = 0usize;
    let mut inner_sum = 0.0;
    let mut inner_n = 0usize;
    for (&e, &on_surface) in per_vertex.iter().zip(surface_mask) {
        if on_surface {
            edge_sum += e;
            edge_n += 1;
        } else {
            inner_sum += e;
            inner_n += 1;
        }
    }
    TreSplit {
        edge: (edge_n > 0).then(|| edge_sum / edge_n as f64),
        inner: (inner_n > 0).then(|| inner_sum / inner_n as f64),
    }
}

/// TRE split by vertex class for a mesh pair (topology-checked).
pub fn tre_split(pred: &TetMesh, gt: &TetMesh) -> Result<TreSplit> {
    let r = tre(pred, gt)?;
    Ok(split_errors(&r.per_vertex, &gt.surface_vertex_mask))
}
