//! Versioned on-disk documents for meshes and measurements.
//!
//! All documents are self-describing JSON with a `format_version` field.
//! Writes go through a temp-file-then-rename so partially written files are
//! never observed.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{SparseMeasurement, SourceTag, TetMesh};

pub const FORMAT_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct MeshDoc {
    format_version: String,
    vertices: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    surface_mask: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    salient_mask: Option<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct MeasurementDoc {
    format_version: String,
    points: Vec<[f64; 3]>,
    tags: Vec<SourceTag>,
    weights: Vec<f64>,
    noise_sigma: f64,
}

fn check_version(path: &Path, version: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("unsupported format_version {version:?}, expected {FORMAT_VERSION:?}"),
        });
    }
    Ok(())
}

/// Serializes `value` as JSON and atomically replaces `path`.
pub fn atomic_write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    atomic_write_bytes(path, text.as_bytes())
}

pub fn atomic_write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn save_mesh(path: &Path, mesh: &TetMesh) -> Result<()> {
    let doc = MeshDoc {
        format_version: FORMAT_VERSION.to_string(),
        vertices: mesh.vertices.clone(),
        tets: mesh.tets.clone(),
        surface_mask: Some(mesh.surface_vertex_mask.clone()),
        salient_mask: Some(mesh.salient_mask.clone()),
    };
    atomic_write_json(path, &doc)
}

pub fn load_mesh(path: &Path) -> Result<TetMesh> {
    let doc: MeshDoc = read_json(path)?;
    check_version(path, &doc.format_version)?;
    let mut mesh = TetMesh::from_stored(doc.vertices, doc.tets)?;
    if let Some(mask) = doc.surface_mask {
        if mask != mesh.surface_vertex_mask {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: "stored surface_mask disagrees with boundary-face classification".into(),
            });
        }
    }
    if let Some(mask) = doc.salient_mask {
        if mask.len() != mesh.vertex_count() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "salient_mask length {} does not match vertex count {}",
                    mask.len(),
                    mesh.vertex_count()
                ),
            });
        }
        mesh.salient_mask = mask;
    }
    Ok(mesh)
}

pub fn save_measurement(path: &Path, meas: &SparseMeasurement) -> Result<()> {
    meas.validate()?;
    let doc = MeasurementDoc {
        format_version: FORMAT_VERSION.to_string(),
        points: meas.points.clone(),
        tags: meas.tags.clone(),
        weights: meas.weights.clone(),
        noise_sigma: meas.noise_sigma,
    };
    atomic_write_json(path, &doc)
}

pub fn load_measurement(path: &Path) -> Result<SparseMeasurement> {
    let doc: MeasurementDoc = read_json(path)?;
    check_version(path, &doc.format_version)?;
    SparseMeasurement::new(doc.points, doc.tags, doc.weights, doc.noise_sigma)
}
