//! Dataset builder: the desk-scale scenario grid, its on-disk layout, and a
//! content-hash manifest that makes regeneration verifiable.
//!
//! Layout: `<root>/<geometry>/<pattern>/<index>/` holding `preop.mesh`,
//! `gt.mesh`, `meas.points` and `spec.doc`, with the manifest at
//! `<root>/manifest.doc`. `libr.mesh` is written into the same directory
//! later by the registration pipeline and is deliberately absent from the
//! generation-time hashes.
//!
//! The grid follows the source dataset structure: one ground-truth
//! deformation per (geometry, pattern) cell, with the cell's scenarios
//! differing only in their measurement draw (sparsity tier, visible patch
//! sampling, noise).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::io::{atomic_write_json, read_json, save_mesh, save_measurement, FORMAT_VERSION};
use crate::mesh::TetMesh;
use crate::synth::{
    derive_seed, gen_geometry, gen_gt_deformation, sample_measurements, DeformationPattern,
    ScenarioSpec, SparsityTier,
};

pub const MANIFEST_NAME: &str = "manifest.doc";
pub const PREOP_FILE: &str = "preop.mesh";
pub const GT_FILE: &str = "gt.mesh";
pub const LIBR_FILE: &str = "libr.mesh";
pub const MEAS_FILE: &str = "meas.points";
pub const SPEC_FILE: &str = "spec.doc";

/// Configuration of the synthetic dataset grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Root seed; every geometry and scenario seed derives from it.
    pub dataset_seed: u64,
    /// Number of training geometries (ids 1..=n_geometries).
    pub n_geometries: usize,
    /// Deformation patterns applied to every training geometry.
    pub patterns: Vec<DeformationPattern>,
    /// Scenarios per (geometry, pattern) cell.
    pub scenarios_per_cell: usize,
    /// Additionally generate the external-test cell: one held-out geometry
    /// (id n_geometries + 1) under the open-surgery pattern V.
    pub include_external: bool,
    pub target_vertex_count: usize,
    /// Peak prescribed displacement as a fraction of the mesh diameter.
    pub deformation_magnitude: f64,
    /// Fraction of the surface area visible to the surface point cloud.
    pub surface_visible_fraction: f64,
    /// Isotropic measurement noise (mm).
    pub noise_sigma: f64,
    /// Fraction of each cell assigned to the sparsity tiers, listed in
    /// `SparsityTier::ALL` order; must sum to 1.
    pub tier_fractions: [f64; 5],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dataset_seed: 7,
            n_geometries: 3,
            patterns: vec![
                DeformationPattern::L,
                DeformationPattern::R,
                DeformationPattern::W,
            ],
            scenarios_per_cell: 20,
            include_external: true,
            target_vertex_count: 650,
            deformation_magnitude: 0.12,
            surface_visible_fraction: 0.25,
            noise_sigma: 1.0,
            tier_fractions: [0.2; 5],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_geometries == 0 {
            return Err(Error::invalid("n_geometries must be at least 1"));
        }
        if self.patterns.is_empty() {
            return Err(Error::EmptyInput("patterns"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.patterns {
            if !seen.insert(*p) {
                return Err(Error::invalid(format!("duplicate pattern {p}")));
            }
        }
        if self.scenarios_per_cell == 0 {
            return Err(Error::invalid("scenarios_per_cell must be at least 1"));
        }
        if self.tier_fractions.iter().any(|&f| !(f.is_finite() && f >= 0.0)) {
            return Err(Error::invalid("tier_fractions must be non-negative"));
        }
        let sum: f64 = self.tier_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "tier_fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// All (geometry id, pattern) cells in deterministic order, the external
    /// cell last.
    pub fn cells(&self) -> Vec<(u32, DeformationPattern)> {
        let mut cells = Vec::new();
        for geom in 1..=self.n_geometries as u32 {
            let mut pats = self.patterns.clone();
            pats.sort();
            for p in pats {
                cells.push((geom, p));
            }
        }
        if self.include_external {
            cells.push((self.n_geometries as u32 + 1, DeformationPattern::V));
        }
        cells
    }
}

/// Assigns each in-cell scenario index a sparsity tier so the counts match
/// the configured fractions as closely as integers allow (largest-remainder
/// rounding, ties toward the sparser tier).
pub fn tier_schedule(fractions: &[f64; 5], n: usize) -> Vec<SparsityTier> {
    let mut counts = [0usize; 5];
    let mut assigned = 0;
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(5);
    for (i, &f) in fractions.iter().enumerate() {
        let exact = f * n as f64;
        counts[i] = exact.floor() as usize;
        assigned += counts[i];
        remainders.push((exact - exact.floor(), i));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut k = 0;
    while assigned < n {
        counts[remainders[k % remainders.len()].1] += 1;
        assigned += 1;
        k += 1;
    }
    let mut schedule = Vec::with_capacity(n);
    for (i, &c) in counts.iter().enumerate() {
        schedule.extend(std::iter::repeat(SparsityTier::ALL[i]).take(c));
    }
    schedule
}

/// One scenario's manifest record: identity, provenance, and content hashes
/// of every file written at generation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    /// Geometry id (1-based; the external geometry is n_geometries + 1).
    pub geometry: u32,
    pub pattern: DeformationPattern,
    /// Index within the (geometry, pattern) cell.
    pub index: u32,
    pub spec: ScenarioSpec,
    /// Scenario directory relative to the dataset root.
    pub dir: String,
    /// File name -> SHA-256 hex digest of the file bytes.
    pub hashes: BTreeMap<String, String>,
}

impl ScenarioEntry {
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.geometry, self.pattern, self.index)
    }

    pub fn path(&self, root: &Path, file: &str) -> PathBuf {
        root.join(&self.dir).join(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub config: DatasetConfig,
    pub scenarios: Vec<ScenarioEntry>,
}

/// Self-describing per-scenario provenance document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDoc {
    pub format_version: String,
    pub geometry: u32,
    pub pattern: DeformationPattern,
    pub index: u32,
    pub spec: ScenarioSpec,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn save_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    atomic_write_json(&root.join(MANIFEST_NAME), manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_NAME);
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "unsupported format_version {:?}, expected {FORMAT_VERSION:?}",
                manifest.format_version
            ),
        });
    }
    Ok(manifest)
}

/// SHA-256 of the manifest file itself, recorded by training checkpoints to
/// pin the exact dataset a model was fit on.
pub fn manifest_hash(root: &Path) -> Result<String> {
    hash_file(&root.join(MANIFEST_NAME))
}

/// Loads the manifest and re-hashes every listed file, failing on the first
/// missing or modified one.
pub fn verify_manifest(root: &Path) -> Result<DatasetManifest> {
    let manifest = load_manifest(root)?;
    for entry in &manifest.scenarios {
        for (file, expected) in &entry.hashes {
            let path = entry.path(root, file);
            let actual = hash_file(&path).map_err(|e| Error::Scenario {
                scenario: entry.id(),
                source: Box::new(e),
            })?;
            if &actual != expected {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("content hash {actual} does not match manifest {expected}"),
                });
            }
        }
    }
    Ok(manifest)
}

pub fn save_spec_doc(path: &Path, doc: &SpecDoc) -> Result<()> {
    atomic_write_json(path, doc)
}

pub fn load_spec_doc(path: &Path) -> Result<SpecDoc> {
    let doc: SpecDoc = read_json(path)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "unsupported format_version {:?}, expected {FORMAT_VERSION:?}",
                doc.format_version
            ),
        });
    }
    Ok(doc)
}

struct ScenarioJob<'a> {
    geometry: u32,
    pattern: DeformationPattern,
    index: u32,
    spec: ScenarioSpec,
    preop: &'a TetMesh,
    gt: &'a TetMesh,
}

/// Generates the full scenario grid under `root` and writes the manifest.
///
/// Deterministic: rebuilding with the same config produces bit-identical
/// files. Ground-truth solves run once per (geometry, pattern) cell and are
/// parallel across cells; scenario sampling and file writes are parallel
/// across scenarios.
pub fn build_dataset(config: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(root)?;

    let cells = config.cells();

    // Geometries (the external one included), keyed by id.
    let mut geom_ids: Vec<u32> = cells.iter().map(|&(g, _)| g).collect();
    geom_ids.dedup();
    let geometries: BTreeMap<u32, (u64, TetMesh)> = geom_ids
        .par_iter()
        .map(|&g| {
            let seed = derive_seed(config.dataset_seed, 1, g as u64);
            let mesh = gen_geometry(seed, config.target_vertex_count)?;
            Ok((g, (seed, mesh)))
        })
        .collect::<Result<_>>()?;

    // One ground-truth deformation per cell.
    let gts: BTreeMap<(u32, DeformationPattern), TetMesh> = cells
        .par_iter()
        .map(|&(g, p)| {
            let gt_seed = derive_seed(config.dataset_seed, 2, cell_label(g, p));
            let gt = gen_gt_deformation(
                &geometries[&g].1,
                p,
                config.deformation_magnitude,
                gt_seed,
            )
            .map_err(|e| Error::Scenario {
                scenario: format!("{g}/{p}"),
                source: Box::new(e),
            })?;
            Ok(((g, p), gt))
        })
        .collect::<Result<_>>()?;

    let schedule = tier_schedule(&config.tier_fractions, config.scenarios_per_cell);
    let mut jobs = Vec::with_capacity(cells.len() * config.scenarios_per_cell);
    for &(g, p) in &cells {
        let (geometry_seed, ref preop) = geometries[&g];
        let gt = &gts[&(g, p)];
        for idx in 0..config.scenarios_per_cell as u32 {
            let scenario_seed =
                derive_seed(config.dataset_seed, 3, cell_label(g, p) * 4096 + idx as u64);
            let spec = ScenarioSpec {
                geometry_seed,
                deformation_pattern: p,
                deformation_magnitude: config.deformation_magnitude,
                sparsity_tier: schedule[idx as usize],
                surface_visible_fraction: config.surface_visible_fraction,
                noise_sigma: config.noise_sigma,
                scenario_seed,
            };
            jobs.push(ScenarioJob {
                geometry: g,
                pattern: p,
                index: idx,
                spec,
                preop,
                gt,
            });
        }
    }

    let mut scenarios: Vec<ScenarioEntry> = jobs
        .par_iter()
        .map(|job| {
            write_scenario(root, job).map_err(|e| Error::Scenario {
                scenario: format!("{}/{}/{}", job.geometry, job.pattern, job.index),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    scenarios.sort_by_key(|e| (e.geometry, e.pattern, e.index));

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.to_string(),
        config: config.clone(),
        scenarios,
    };
    save_manifest(root, &manifest)?;
    Ok(manifest)
}

/// Stable per-cell label for seed derivation (patterns occupy 2 bits).
fn cell_label(geometry: u32, pattern: DeformationPattern) -> u64 {
    let p = DeformationPattern::ALL
        .iter()
        .position(|&q| q == pattern)
        .unwrap() as u64;
    geometry as u64 * 4 + p
}

fn write_scenario(root: &Path, job: &ScenarioJob<'_>) -> Result<ScenarioEntry> {
    let dir_rel = format!("{}/{}/{}", job.geometry, job.pattern, job.index);
    let dir = root.join(&dir_rel);
    fs::create_dir_all(&dir)?;

    let meas = sample_measurements(job.gt, &job.spec)?;
    let spec_doc = SpecDoc {
        format_version: FORMAT_VERSION.to_string(),
        geometry: job.geometry,
        pattern: job.pattern,
        index: job.index,
        spec: job.spec.clone(),
    };

    save_mesh(&dir.join(PREOP_FILE), job.preop)?;
    save_mesh(&dir.join(GT_FILE), job.gt)?;
    save_measurement(&dir.join(MEAS_FILE), &meas)?;
    save_spec_doc(&dir.join(SPEC_FILE), &spec_doc)?;

    let mut hashes = BTreeMap::new();
    for file in [PREOP_FILE, GT_FILE, MEAS_FILE, SPEC_FILE] {
        hashes.insert(file.to_string(), hash_file(&dir.join(file))?);
    }

    Ok(ScenarioEntry {
        geometry: job.geometry,
        pattern: job.pattern,
        index: job.index,
        spec: job.spec.clone(),
        dir: dir_rel,
        hashes,
    })
}
