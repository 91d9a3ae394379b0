//! Experiment orchestration: master configuration, pipeline stages and
//! result-table emission.
//!
//! An experiment lives in one output directory:
//!
//! ```text
//! <out>/config.doc              resolved configuration actually used
//! <out>/data/...                dataset (manifest + scenario directories)
//! <out>/basis/g<g>.doc          per-geometry deformation-basis checkpoints
//! <out>/models/<split>.*        trained models, sidecars and training logs
//! <out>/predictions/<split>/    corrected meshes for each test scenario
//! <out>/errors/<split>/         per-vertex error fields for plot emission
//! <out>/tables/                 result tables (.jsonl machine + .txt text)
//! <out>/summary.doc             per-stage success/failure overview
//! ```
//!
//! Stage artifacts for a scenario (`wicp.doc`, `libr.mesh`, `libr.doc`,
//! `graphs.doc`) are written into its dataset directory. Every stage records
//! per-scenario failures and keeps going; the run summary flags them.
//!
//! Reproducibility: everything except measured wall-clock time derives from
//! seeds in the configuration, so result tables and error fields are
//! bit-identical across reruns on one platform. Wall time is reported only
//! in the separate timing table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ablation::AblationSetting;
use crate::eval::metrics::{mean_std, split_errors, tre};
use crate::eval::splits::{make_splits, Split, SplitSpec, SplitStrategy};
use crate::eval::tables::{save_table, ResultRow};
use crate::fem::Material;
use crate::mesh::io::{
    atomic_write_json, load_measurement, load_mesh, read_json, save_mesh, FORMAT_VERSION,
};
use crate::mesh::{
    build_bipartite_graph, build_liver_graph, BipartiteGraph, LiverGraph, PseudoMode,
    SourceTag, SparseMeasurement, TetMesh,
};
use crate::registration::{
    libr_build_basis, libr_reconstruct, load_basis, save_basis, wicp_register, DeformationBasis,
    LibrBasisOptions, LibrOptions, RigidTransform,
};
use crate::srgcn::{
    build_train_scenario, load_model, predict_residual, save_model, save_train_log,
    train_two_stage, SrGcnConfig, SrGcnModel, TrainOptions, TrainScenario,
};
use crate::synth::{
    build_dataset, derive_seed, manifest_hash, verify_manifest, DatasetConfig, DatasetManifest,
    DeformationPattern, ScenarioEntry, SparsityTier, GT_FILE, LIBR_FILE, MEAS_FILE, PREOP_FILE,
};

/// Per-scenario artifact written by `run_wicp`.
pub const WICP_DOC: &str = "wicp.doc";
/// Per-scenario artifact written by `run_libr` next to `libr.mesh`.
pub const LIBR_DOC: &str = "libr.doc";
/// Per-scenario artifact written by `build_graphs`.
pub const GRAPHS_DOC: &str = "graphs.doc";

/// Methods evaluated on every test scenario, in table order.
pub const METHODS: [&str; 4] = ["preop", "wicp", "libr", "libr_plus"];

const VAL_CARVE_LABEL: u64 = 11;
const TRAIN_SEED_LABEL: u64 = 12;
const ABLATION_SEED_LABEL: u64 = 13;
const LAMBDA_SEED_LABEL: u64 = 14;

/// Which mesh bipartite correspondences are built against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceTarget {
    /// The true deformed mesh (training/evaluation convention).
    #[default]
    Gt,
    /// The LIBR mesh (the deployable convention, available at inference).
    Libr,
}

/// wICP stage parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WicpConfig {
    pub max_iter: usize,
    /// Stop once the weighted RMS improves by less than this (mm).
    pub tol: f64,
}

impl Default for WicpConfig {
    fn default() -> Self {
        WicpConfig {
            max_iter: 50,
            tol: 1e-9,
        }
    }
}

/// Root experiment configuration: a single versioned document covering
/// every tunable default of the engine. Unknown fields are rejected;
/// omitted fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterConfig {
    pub format_version: String,
    /// Master seed for training initialization and validation carving.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub wicp: WicpConfig,
    /// Material of the deformation-basis solves (the basis span is
    /// invariant to the Young's modulus).
    pub material: Material,
    pub basis: LibrBasisOptions,
    pub libr: LibrOptions,
    pub srgcn: SrGcnConfig,
    pub train: TrainOptions,
    pub correspondence_target: CorrespondenceTarget,
    /// Fraction of each training split carved off for validation tracking.
    pub val_fraction: f64,
    pub splits: Vec<SplitSpec>,
    /// Sparse-loss weights swept by the ablation harness.
    pub lambda_sweep: Vec<f64>,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            format_version: FORMAT_VERSION.to_string(),
            seed: 7,
            dataset: DatasetConfig::default(),
            wicp: WicpConfig::default(),
            material: Material {
                youngs_modulus: 2100.0,
                poisson_ratio: 0.45,
            },
            basis: LibrBasisOptions::default(),
            libr: LibrOptions::default(),
            srgcn: SrGcnConfig::default(),
            train: TrainOptions::default(),
            correspondence_target: CorrespondenceTarget::default(),
            val_fraction: 0.2,
            splits: default_splits(),
            lambda_sweep: vec![0.1, 1.0, 10.0],
        }
    }
}

fn default_splits() -> Vec<SplitSpec> {
    vec![
        SplitSpec {
            name: "random".to_string(),
            strategy: SplitStrategy::Random { test_fraction: 0.2 },
            seed: 101,
        },
        SplitSpec {
            name: "geometry_deformation_holdout".to_string(),
            strategy: SplitStrategy::GeometryDeformationHoldout {
                holdout: vec![
                    (1, DeformationPattern::L),
                    (1, DeformationPattern::R),
                    (3, DeformationPattern::W),
                ],
            },
            seed: 102,
        },
        SplitSpec {
            name: "geometry_holdout".to_string(),
            strategy: SplitStrategy::GeometryHoldout { geometry: 3 },
            seed: 103,
        },
        SplitSpec {
            name: "external_4v".to_string(),
            strategy: SplitStrategy::External4V,
            seed: 104,
        },
    ]
}

impl MasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported config format_version {:?}, expected {FORMAT_VERSION:?}",
                self.format_version
            )));
        }
        self.dataset.validate()?;
        self.material.validate()?;
        self.srgcn.validate()?;
        if self.wicp.max_iter == 0 {
            return Err(Error::invalid("wicp.max_iter must be at least 1"));
        }
        if !(self.wicp.tol.is_finite() && self.wicp.tol >= 0.0) {
            return Err(Error::invalid("wicp.tol must be finite and >= 0"));
        }
        if !(self.val_fraction.is_finite() && (0.0..=0.5).contains(&self.val_fraction)) {
            return Err(Error::invalid(format!(
                "val_fraction must lie in [0, 0.5], got {}",
                self.val_fraction
            )));
        }
        if self.splits.is_empty() {
            return Err(Error::invalid("at least one split must be configured"));
        }
        let mut names = BTreeSet::new();
        for spec in &self.splits {
            spec.validate()?;
            if !names.insert(spec.name.clone()) {
                return Err(Error::invalid(format!(
                    "duplicate split name {:?}",
                    spec.name
                )));
            }
        }
        for lambda in &self.lambda_sweep {
            if !(lambda.is_finite() && *lambda >= 0.0) {
                return Err(Error::invalid(format!(
                    "lambda_sweep entries must be finite and >= 0, got {lambda}"
                )));
            }
        }
        Ok(())
    }
}

/// Writes a configuration document.
pub fn save_config(path: &Path, cfg: &MasterConfig) -> Result<()> {
    cfg.validate()?;
    atomic_write_json(path, cfg)
}

/// Reads and validates a configuration document.
pub fn load_config(path: &Path) -> Result<MasterConfig> {
    let cfg: MasterConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical layout of an experiment output directory.
#[derive(Debug, Clone)]
pub struct OutPaths {
    root: PathBuf,
}

impl OutPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutPaths { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.doc")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.doc")
    }

    /// Dataset root (holds `manifest.doc` and the scenario directories).
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn basis(&self, geometry: u32) -> PathBuf {
        self.root.join("basis").join(format!("g{geometry}.doc"))
    }

    /// Model stem; `save_model` appends `.params` / `.config`.
    pub fn model_stem(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }

    pub fn train_log(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.trainlog"))
    }

    pub fn prediction(&self, split: &str, entry: &ScenarioEntry) -> PathBuf {
        self.root
            .join("predictions")
            .join(split)
            .join(format!("{}.mesh", file_id(entry)))
    }

    pub fn prediction_doc(&self, split: &str, entry: &ScenarioEntry) -> PathBuf {
        self.root
            .join("predictions")
            .join(split)
            .join(format!("{}.pred.doc", file_id(entry)))
    }

    pub fn error_field(&self, split: &str, entry: &ScenarioEntry) -> PathBuf {
        self.root
            .join("errors")
            .join(split)
            .join(format!("{}.doc", file_id(entry)))
    }

    pub fn tables_dir(&self) -> PathBuf {
        self.root.join("tables")
    }
}

/// Scenario id with path separators flattened for file names ("1_L_0").
pub fn file_id(entry: &ScenarioEntry) -> String {
    format!("{}_{}_{}", entry.geometry, entry.pattern, entry.index)
}

/// One scenario that a stage could not complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub scenario: String,
    pub error: String,
}

/// Outcome of one pipeline stage; failures never abort the stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub succeeded: usize,
    pub failures: Vec<StageFailure>,
}

impl StageSummary {
    fn new(stage: &str) -> Self {
        StageSummary {
            stage: stage.to_string(),
            succeeded: 0,
            failures: Vec::new(),
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, scenario: String, error: &Error) {
        self.failures.push(StageFailure {
            scenario,
            error: error.to_string(),
        });
    }
}

/// Whole-run overview written to `summary.doc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: String,
    /// True iff no stage recorded any failure.
    pub ok: bool,
    pub stages: Vec<StageSummary>,
}

/// Per-scenario rigid-initialization record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WicpDoc {
    pub format_version: String,
    /// Maps measurement points into the preoperative frame.
    pub transform: RigidTransform,
    /// Weighted RMS (mm) at the final correspondence.
    pub final_rms: f64,
    pub iterations: usize,
    /// Measured wall time (s); not covered by reproducibility guarantees.
    pub seconds: f64,
}

/// Per-scenario deformable-reconstruction record next to `libr.mesh`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LibrDoc {
    pub format_version: String,
    pub weights: Vec<f64>,
    pub iterations_used: usize,
    /// RMS (mm) between measurements and matched deformed vertices.
    pub final_rms: f64,
    /// Measured wall time (s); not covered by reproducibility guarantees.
    pub seconds: f64,
}

/// Materialized graphs for one scenario under the main configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphsDoc {
    pub format_version: String,
    pub pseudo_mode: PseudoMode,
    pub n_top: usize,
    pub correspondence_target: CorrespondenceTarget,
    /// Whether liver-graph attributes carry the LIBR coordinates.
    pub attrs_include_libr: bool,
    pub liver: LiverGraph,
    pub bipartite: Option<BipartiteGraph>,
}

/// Timing sidecar for one predicted mesh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredDoc {
    pub format_version: String,
    /// Measured wall time (s); not covered by reproducibility guarantees.
    pub seconds: f64,
}

/// Per-vertex error fields of one test scenario, every method, for plots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorFieldDoc {
    pub format_version: String,
    pub scenario: String,
    pub split: String,
    /// Method name -> per-vertex TRE (mm) in mesh vertex order.
    pub methods: BTreeMap<String, Vec<f64>>,
}

fn read_versioned<T: serde::de::DeserializeOwned>(path: &Path, version: &str) -> Result<T>
where
    T: HasVersion,
{
    let doc: T = read_json(path)?;
    if doc.version() != version {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "unsupported format_version {:?}, expected {version:?}",
                doc.version()
            ),
        });
    }
    Ok(doc)
}

trait HasVersion {
    fn version(&self) -> &str;
}

macro_rules! has_version {
    ($($t:ty),*) => {
        $(impl HasVersion for $t {
            fn version(&self) -> &str {
                &self.format_version
            }
        })*
    };
}

has_version!(WicpDoc, LibrDoc, GraphsDoc, PredDoc, ErrorFieldDoc);

/// Applies a rigid transform to every vertex; topology and masks carry over.
fn transform_mesh(mesh: &TetMesh, t: &RigidTransform) -> TetMesh {
    let mut out = mesh.clone();
    out.vertices = t.apply_all(&mesh.vertices);
    out
}

/// Runs `f` over the entries in parallel, splitting successes and failures.
/// Successes keep the input order.
fn map_scenarios<T: Send>(
    entries: &[ScenarioEntry],
    f: impl Fn(&ScenarioEntry) -> Result<T> + Sync,
) -> (Vec<(ScenarioEntry, T)>, Vec<StageFailure>) {
    let results: Vec<Result<T>> = entries.par_iter().map(&f).collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (entry, result) in entries.iter().zip(results) {
        match result {
            Ok(v) => ok.push((entry.clone(), v)),
            Err(e) => failures.push(StageFailure {
                scenario: entry.id(),
                error: e.to_string(),
            }),
        }
    }
    (ok, failures)
}

fn scenario_err(entry: &ScenarioEntry, e: Error) -> Error {
    Error::Scenario {
        scenario: entry.id(),
        source: Box::new(e),
    }
}

/// Generates the dataset under `<out>/data`, or reuses an existing one after
/// verifying that its configuration matches and every content hash checks
/// out. A mismatching existing dataset is an error, never overwritten.
pub fn gen_data(cfg: &MasterConfig, out: &OutPaths) -> Result<DatasetManifest> {
    cfg.validate()?;
    let data_dir = out.data_dir();
    if data_dir.join(crate::synth::MANIFEST_NAME).exists() {
        let manifest = verify_manifest(&data_dir)?;
        if manifest.config != cfg.dataset {
            return Err(Error::invalid(format!(
                "existing dataset at {} was generated from a different configuration; \
                 remove it or point --out elsewhere",
                data_dir.display()
            )));
        }
        return Ok(manifest);
    }
    build_dataset(&cfg.dataset, &data_dir)
}

fn load_wicp(root: &Path, entry: &ScenarioEntry) -> Result<WicpDoc> {
    let path = entry.path(root, WICP_DOC);
    if !path.exists() {
        return Err(Error::invalid(format!(
            "missing {WICP_DOC} for scenario {} (run run-wicp first)",
            entry.id()
        )));
    }
    read_versioned(&path, FORMAT_VERSION)
}

fn load_libr_outputs(root: &Path, entry: &ScenarioEntry) -> Result<(TetMesh, LibrDoc)> {
    let mesh_path = entry.path(root, LIBR_FILE);
    let doc_path = entry.path(root, LIBR_DOC);
    if !mesh_path.exists() || !doc_path.exists() {
        return Err(Error::invalid(format!(
            "missing LIBR outputs for scenario {} (run run-libr first)",
            entry.id()
        )));
    }
    Ok((load_mesh(&mesh_path)?, read_versioned(&doc_path, FORMAT_VERSION)?))
}

/// Measurement points mapped into the preoperative frame by the wICP
/// estimate; tags, weights and noise level carry over.
fn aligned_measurement(meas: &SparseMeasurement, t: &RigidTransform) -> SparseMeasurement {
    SparseMeasurement {
        points: t.apply_all(&meas.points),
        tags: meas.tags.clone(),
        weights: meas.weights.clone(),
        noise_sigma: meas.noise_sigma,
    }
}

/// Rigid initialization for every scenario: registers the surface-tagged
/// measurement points (salient weights respected) onto the preoperative
/// surface vertices and stores the estimated transform in `wicp.doc`.
///
/// Subsurface points are excluded from the rigid fit: they lie inside the
/// volume, so their nearest surface vertex is not a correspondence.
pub fn run_wicp(cfg: &MasterConfig, out: &OutPaths, manifest: &DatasetManifest) -> StageSummary {
    let mut summary = StageSummary::new("run-wicp");
    let root = out.data_dir();
    let (ok, failures) = map_scenarios(&manifest.scenarios, |entry| {
        let preop = load_mesh(&entry.path(&root, PREOP_FILE))?;
        let meas = load_measurement(&entry.path(&root, MEAS_FILE))?;
        let mut source = Vec::new();
        let mut weights = Vec::new();
        for ((p, tag), w) in meas.points.iter().zip(&meas.tags).zip(&meas.weights) {
            if *tag == SourceTag::Surface {
                source.push(*p);
                weights.push(*w);
            }
        }
        let target: Vec<[f64; 3]> = preop
            .surface_vertices()
            .into_iter()
            .map(|v| preop.vertices[v])
            .collect();
        let started = Instant::now();
        let report = wicp_register(&source, &weights, &target, cfg.wicp.max_iter, cfg.wicp.tol)
            .map_err(|e| scenario_err(entry, e))?;
        let seconds = started.elapsed().as_secs_f64();
        atomic_write_json(
            &entry.path(&root, WICP_DOC),
            &WicpDoc {
                format_version: FORMAT_VERSION.to_string(),
                transform: report.transform,
                final_rms: report.final_rms,
                iterations: report.iterations,
                seconds,
            },
        )
    });
    summary.succeeded = ok.len();
    summary.failures = failures;
    summary
}

/// Builds (or reuses) the per-geometry deformation basis and reuses it for a
/// checked load: an existing checkpoint built from different options or
/// material is rebuilt.
fn geometry_basis(
    cfg: &MasterConfig,
    out: &OutPaths,
    geometry: u32,
    preop: &TetMesh,
) -> Result<DeformationBasis> {
    let path = out.basis(geometry);
    if path.exists() {
        let (basis, material, params) = load_basis(&path)?;
        if material == cfg.material && params == cfg.basis && basis.n_vertices == preop.vertex_count()
        {
            return Ok(basis);
        }
    }
    let basis = libr_build_basis(preop, &cfg.material, &cfg.basis)?;
    save_basis(&path, &basis, &cfg.material, &cfg.basis)?;
    Ok(basis)
}

/// Deformable reconstruction for every scenario: builds one deformation
/// basis per geometry, maps measurements into the preoperative frame with
/// the stored wICP estimate, runs the iterative reconstruction, and writes
/// `libr.mesh` plus `libr.doc`.
pub fn run_libr(cfg: &MasterConfig, out: &OutPaths, manifest: &DatasetManifest) -> StageSummary {
    let mut summary = StageSummary::new("run-libr");
    let root = out.data_dir();

    let mut by_geometry: BTreeMap<u32, Vec<ScenarioEntry>> = BTreeMap::new();
    for entry in &manifest.scenarios {
        by_geometry
            .entry(entry.geometry)
            .or_default()
            .push(entry.clone());
    }

    let geometry_results: Vec<(u32, Vec<ScenarioEntry>, Result<(TetMesh, DeformationBasis)>)> =
        by_geometry
            .into_iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(geometry, entries)| {
                let prepared = (|| {
                    let preop = load_mesh(&entries[0].path(&root, PREOP_FILE))?;
                    let basis = geometry_basis(cfg, out, geometry, &preop)?;
                    Ok((preop, basis))
                })();
                (geometry, entries, prepared)
            })
            .collect();

    for (_, entries, prepared) in geometry_results {
        let (preop, basis) = match prepared {
            Ok(p) => p,
            Err(e) => {
                for entry in &entries {
                    summary.record(entry.id(), &e);
                }
                continue;
            }
        };
        let (ok, failures) = map_scenarios(&entries, |entry| {
            let meas = load_measurement(&entry.path(&root, MEAS_FILE))?;
            let wicp = load_wicp(&root, entry)?;
            let aligned = aligned_measurement(&meas, &wicp.transform);
            let started = Instant::now();
            let solution = libr_reconstruct(&basis, &preop, &aligned, &cfg.libr)
                .map_err(|e| scenario_err(entry, e))?;
            let seconds = started.elapsed().as_secs_f64();
            save_mesh(&entry.path(&root, LIBR_FILE), &solution.deformed_mesh)?;
            atomic_write_json(
                &entry.path(&root, LIBR_DOC),
                &LibrDoc {
                    format_version: FORMAT_VERSION.to_string(),
                    weights: solution.weights,
                    iterations_used: solution.iterations_used,
                    final_rms: solution.final_rms,
                    seconds,
                },
            )
        });
        summary.succeeded += ok.len();
        summary.failures.extend(failures);
    }
    summary
}

/// Everything later stages need about one scenario, loaded and aligned into
/// the preoperative frame.
struct ScenarioBundle {
    preop: TetMesh,
    /// True deformed mesh mapped by the wICP estimate (the reference that
    /// LIBR and the network approximate in the preoperative frame).
    gt_aligned: TetMesh,
    /// True deformed mesh in the intraoperative frame (untouched).
    gt: TetMesh,
    libr: TetMesh,
    /// Measurements mapped into the preoperative frame.
    meas: SparseMeasurement,
    /// Per-method registration wall times in seconds (wicp, libr).
    wicp_seconds: f64,
    libr_seconds: f64,
}

impl ScenarioBundle {
    fn corr_mesh(&self, target: CorrespondenceTarget) -> &TetMesh {
        match target {
            CorrespondenceTarget::Gt => &self.gt_aligned,
            CorrespondenceTarget::Libr => &self.libr,
        }
    }
}

fn load_bundle(root: &Path, entry: &ScenarioEntry) -> Result<ScenarioBundle> {
    let preop = load_mesh(&entry.path(root, PREOP_FILE))?;
    let gt = load_mesh(&entry.path(root, GT_FILE))?;
    let meas = load_measurement(&entry.path(root, MEAS_FILE))?;
    let wicp = load_wicp(root, entry)?;
    let (libr, libr_doc) = load_libr_outputs(root, entry)?;
    Ok(ScenarioBundle {
        gt_aligned: transform_mesh(&gt, &wicp.transform),
        gt,
        libr,
        meas: aligned_measurement(&meas, &wicp.transform),
        preop,
        wicp_seconds: wicp.seconds,
        libr_seconds: libr_doc.seconds,
    })
}

/// Materializes the liver-mesh graph and (when the configuration uses it)
/// the measurement bipartite graph for every scenario into `graphs.doc`.
/// Training rebuilds the same graphs deterministically from the meshes;
/// this artifact exposes them for inspection and external consumers.
pub fn build_graphs(cfg: &MasterConfig, out: &OutPaths, manifest: &DatasetManifest) -> StageSummary {
    let mut summary = StageSummary::new("build-graphs");
    let root = out.data_dir();
    let (ok, failures) = map_scenarios(&manifest.scenarios, |entry| {
        let bundle = load_bundle(&root, entry)?;
        let attr_mesh = if cfg.train.attrs_include_libr {
            &bundle.libr
        } else {
            &bundle.preop
        };
        let liver = build_liver_graph(&bundle.preop, attr_mesh, cfg.srgcn.pseudo_mode)
            .map_err(|e| scenario_err(entry, e))?;
        let bipartite = if cfg.train.use_bipartite || cfg.train.use_sparse {
            Some(
                build_bipartite_graph(
                    &bundle.meas,
                    bundle.corr_mesh(cfg.correspondence_target),
                    &bundle.preop,
                    cfg.srgcn.n_top,
                    cfg.srgcn.pseudo_mode,
                )
                .map_err(|e| scenario_err(entry, e))?,
            )
        } else {
            None
        };
        atomic_write_json(
            &entry.path(&root, GRAPHS_DOC),
            &GraphsDoc {
                format_version: FORMAT_VERSION.to_string(),
                pseudo_mode: cfg.srgcn.pseudo_mode,
                n_top: cfg.srgcn.n_top,
                correspondence_target: cfg.correspondence_target,
                attrs_include_libr: cfg.train.attrs_include_libr,
                liver,
                bipartite,
            },
        )
    });
    summary.succeeded = ok.len();
    summary.failures = failures;
    summary
}

/// Deterministically carves a validation subset off a training list.
fn carve_val(
    train: Vec<ScenarioEntry>,
    fraction: f64,
    seed: u64,
) -> (Vec<ScenarioEntry>, Vec<ScenarioEntry>) {
    if fraction <= 0.0 || train.len() < 2 {
        return (train, Vec::new());
    }
    let n_val = (((train.len() as f64) * fraction).round() as usize).min(train.len() - 1);
    if n_val == 0 {
        return (train, Vec::new());
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_set: BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut kept = Vec::new();
    let mut val = Vec::new();
    for (i, e) in train.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(e);
        } else {
            kept.push(e);
        }
    }
    (kept, val)
}

/// Builds training tensors for the given scenarios under specific options,
/// recording per-scenario failures instead of aborting.
fn build_scenarios(
    cfg: &MasterConfig,
    root: &Path,
    entries: &[ScenarioEntry],
    srgcn: &SrGcnConfig,
    opts: &TrainOptions,
) -> (Vec<TrainScenario>, Vec<StageFailure>) {
    let (ok, failures) = map_scenarios(entries, |entry| {
        let bundle = load_bundle(root, entry)?;
        build_train_scenario(
            &entry.id(),
            &bundle.preop,
            &bundle.gt_aligned,
            &bundle.libr,
            &bundle.meas,
            bundle.corr_mesh(cfg.correspondence_target),
            srgcn,
            opts,
        )
        .map_err(|e| scenario_err(entry, e))
    });
    (ok.into_iter().map(|(_, sc)| sc).collect(), failures)
}

/// Trains one model per configured split and saves it (with its sidecar and
/// training log) under `<out>/models/<split-name>`.
pub fn train_models(cfg: &MasterConfig, out: &OutPaths, manifest: &DatasetManifest) -> StageSummary {
    let mut summary = StageSummary::new("train");
    let root = out.data_dir();
    let dataset_hash = manifest_hash(&root).ok();
    for (idx, spec) in cfg.splits.iter().enumerate() {
        let result = (|| -> Result<usize> {
            let split = make_splits(manifest, spec)?;
            let (train_entries, val_entries) = carve_val(
                split.train,
                cfg.val_fraction,
                derive_seed(cfg.seed, VAL_CARVE_LABEL, idx as u64),
            );
            let (train_scs, train_failures) =
                build_scenarios(cfg, &root, &train_entries, &cfg.srgcn, &cfg.train);
            let (val_scs, val_failures) =
                build_scenarios(cfg, &root, &val_entries, &cfg.srgcn, &cfg.train);
            summary.failures.extend(train_failures);
            summary.failures.extend(val_failures);
            if train_scs.is_empty() {
                return Err(Error::invalid(format!(
                    "split {:?} has no usable training scenarios",
                    spec.name
                )));
            }
            let seed = derive_seed(cfg.seed, TRAIN_SEED_LABEL, idx as u64);
            let (model, records) =
                train_two_stage(&cfg.srgcn, &cfg.train, &train_scs, &val_scs, seed)?;
            save_model(
                &out.model_stem(&spec.name),
                &model,
                &cfg.train,
                dataset_hash.as_deref(),
            )?;
            save_train_log(&out.train_log(&spec.name), &records)?;
            Ok(train_scs.len())
        })();
        match result {
            Ok(_) => summary.succeeded += 1,
            Err(e) => summary.record(format!("split {}", spec.name), &e),
        }
    }
    summary
}

/// Applies each split's trained model to its test scenarios and writes the
/// corrected meshes under `<out>/predictions/<split>/`.
pub fn register_predictions(
    cfg: &MasterConfig,
    out: &OutPaths,
    manifest: &DatasetManifest,
) -> StageSummary {
    let mut summary = StageSummary::new("register");
    let root = out.data_dir();
    for spec in &cfg.splits {
        let loaded = (|| -> Result<(Split, SrGcnModel, TrainOptions)> {
            let split = make_splits(manifest, spec)?;
            let (model, opts, _) = load_model(&out.model_stem(&spec.name))?;
            Ok((split, model, opts))
        })();
        let (split, model, opts) = match loaded {
            Ok(v) => v,
            Err(e) => {
                summary.record(format!("split {}", spec.name), &e);
                continue;
            }
        };
        let (ok, failures) = map_scenarios(&split.test, |entry| {
            let bundle = load_bundle(&root, entry)?;
            let started = Instant::now();
            let predicted = predict_residual(
                &model,
                &opts,
                &bundle.preop,
                &bundle.libr,
                &bundle.meas,
                bundle.corr_mesh(cfg.correspondence_target),
            )
            .map_err(|e| scenario_err(entry, e))?;
            let seconds = started.elapsed().as_secs_f64();
            save_mesh(&out.prediction(&spec.name, entry), &predicted)?;
            atomic_write_json(
                &out.prediction_doc(&spec.name, entry),
                &PredDoc {
                    format_version: FORMAT_VERSION.to_string(),
                    seconds,
                },
            )
        });
        summary.succeeded += ok.len();
        summary.failures.extend(failures);
    }
    summary
}

/// Everything measured for one method on one test scenario.
struct MethodStat {
    mean: f64,
    edge: Option<f64>,
    inner: Option<f64>,
    runtime: f64,
}

struct ScenarioEval {
    tier: SparsityTier,
    /// Keyed by method name; per-vertex fields live in the error doc.
    stats: BTreeMap<&'static str, MethodStat>,
}

fn eval_scenario(
    out: &OutPaths,
    root: &Path,
    spec_name: &str,
    entry: &ScenarioEntry,
    with_prediction: bool,
) -> Result<ScenarioEval> {
    let bundle = load_bundle(root, entry)?;
    let mut stats = BTreeMap::new();
    let mut fields: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    let push = |method: &'static str,
                    pred: &TetMesh,
                    reference: &TetMesh,
                    runtime: f64,
                    stats: &mut BTreeMap<&'static str, MethodStat>,
                    fields: &mut BTreeMap<String, Vec<f64>>|
     -> Result<()> {
        let r = tre(pred, reference).map_err(|e| scenario_err(entry, e))?;
        let s = split_errors(&r.per_vertex, &reference.surface_vertex_mask);
        stats.insert(
            method,
            MethodStat {
                mean: r.mean,
                edge: s.edge,
                inner: s.inner,
                runtime,
            },
        );
        fields.insert(method.to_string(), r.per_vertex);
        Ok(())
    };

    // Registered meshes live in the preoperative frame; comparing them with
    // the rigidly aligned GT equals mapping them back into the
    // intraoperative frame and comparing with the raw GT (rigid transforms
    // preserve distances). The identity method skips the rigid stage.
    push("preop", &bundle.preop, &bundle.gt, 0.0, &mut stats, &mut fields)?;
    push(
        "wicp",
        &bundle.preop,
        &bundle.gt_aligned,
        bundle.wicp_seconds,
        &mut stats,
        &mut fields,
    )?;
    push(
        "libr",
        &bundle.libr,
        &bundle.gt_aligned,
        bundle.wicp_seconds + bundle.libr_seconds,
        &mut stats,
        &mut fields,
    )?;
    if with_prediction {
        let predicted = load_mesh(&out.prediction(spec_name, entry))?;
        let pred_doc: PredDoc =
            read_versioned(&out.prediction_doc(spec_name, entry), FORMAT_VERSION)?;
        push(
            "libr_plus",
            &predicted,
            &bundle.gt_aligned,
            bundle.wicp_seconds + bundle.libr_seconds + pred_doc.seconds,
            &mut stats,
            &mut fields,
        )?;
    }

    atomic_write_json(
        &out.error_field(spec_name, entry),
        &ErrorFieldDoc {
            format_version: FORMAT_VERSION.to_string(),
            scenario: entry.id(),
            split: spec_name.to_string(),
            methods: fields,
        },
    )?;

    Ok(ScenarioEval {
        tier: entry.spec.sparsity_tier,
        stats,
    })
}

/// Aggregates per-scenario means into one table row: mean/std over
/// scenarios, edge/inner means over the scenarios that have the class.
fn aggregate_row(
    method: &str,
    split: &str,
    tier: Option<SparsityTier>,
    stats: &[&MethodStat],
    with_runtime: bool,
) -> Option<ResultRow> {
    if stats.is_empty() {
        return None;
    }
    let means: Vec<f64> = stats.iter().map(|s| s.mean).collect();
    let (mean_tre, std_tre) = mean_std(&means);
    let edges: Vec<f64> = stats.iter().filter_map(|s| s.edge).collect();
    let inners: Vec<f64> = stats.iter().filter_map(|s| s.inner).collect();
    let runtimes: Vec<f64> = stats.iter().map(|s| s.runtime).collect();
    Some(ResultRow {
        method: method.to_string(),
        split: split.to_string(),
        tier,
        mean_tre,
        std_tre,
        edge_tre: (!edges.is_empty()).then(|| mean_std(&edges).0),
        inner_tre: (!inners.is_empty()).then(|| mean_std(&inners).0),
        runtime_s: with_runtime.then(|| mean_std(&runtimes).0),
    })
}

fn rows_for_method_set(
    split_name: &str,
    methods: &[&'static str],
    evals: &[ScenarioEval],
    with_runtime: bool,
) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    let tiers_present: BTreeSet<SparsityTier> = evals.iter().map(|e| e.tier).collect();
    for &method in methods {
        let all: Vec<&MethodStat> = evals.iter().filter_map(|e| e.stats.get(method)).collect();
        rows.extend(aggregate_row(method, split_name, None, &all, with_runtime));
        if tiers_present.len() > 1 {
            for tier in SparsityTier::ALL {
                if !tiers_present.contains(&tier) {
                    continue;
                }
                let of_tier: Vec<&MethodStat> = evals
                    .iter()
                    .filter(|e| e.tier == tier)
                    .filter_map(|e| e.stats.get(method))
                    .collect();
                rows.extend(aggregate_row(method, split_name, Some(tier), &of_tier, with_runtime));
            }
        }
    }
    rows
}

/// Evaluates every configured split's test set for all methods, writes the
/// deterministic result tables (`results`, `sparsity`), the volatile timing
/// table (`timings`), and per-scenario per-vertex error fields.
///
/// The sparsity table reports the training-free methods over the entire
/// main grid (split label "all"), which gives the per-tier comparison the
/// full population rather than one split's test subset.
pub fn evaluate(
    cfg: &MasterConfig,
    out: &OutPaths,
    manifest: &DatasetManifest,
) -> (Vec<ResultRow>, StageSummary) {
    let mut summary = StageSummary::new("evaluate");
    let root = out.data_dir();
    let mut result_rows: Vec<ResultRow> = Vec::new();
    let mut timing_rows: Vec<ResultRow> = Vec::new();

    for spec in &cfg.splits {
        let split = match make_splits(manifest, spec) {
            Ok(s) => s,
            Err(e) => {
                summary.record(format!("split {}", spec.name), &e);
                continue;
            }
        };
        let (ok, failures) = map_scenarios(&split.test, |entry| {
            eval_scenario(out, &root, &spec.name, entry, true)
        });
        summary.succeeded += ok.len();
        summary.failures.extend(failures);
        let evals: Vec<ScenarioEval> = ok.into_iter().map(|(_, e)| e).collect();
        result_rows.extend(rows_for_method_set(&spec.name, &METHODS, &evals, false));
        // Timing pools tiers; per-tier wall times add nothing.
        for method in METHODS {
            let all: Vec<&MethodStat> = evals.iter().filter_map(|e| e.stats.get(method)).collect();
            timing_rows.extend(aggregate_row(method, &spec.name, None, &all, true));
        }
    }

    // Sparsity-tier table over the whole main grid, training-free methods.
    let main_entries: Vec<ScenarioEntry> = manifest
        .scenarios
        .iter()
        .filter(|e| e.geometry as usize <= manifest.config.n_geometries)
        .cloned()
        .collect();
    let (ok, failures) = map_scenarios(&main_entries, |entry| {
        eval_scenario(out, &root, "all", entry, false)
    });
    summary.succeeded += ok.len();
    summary.failures.extend(failures);
    let evals: Vec<ScenarioEval> = ok.into_iter().map(|(_, e)| e).collect();
    let sparsity_rows = rows_for_method_set("all", &["preop", "wicp", "libr"], &evals, false);

    let tables = out.tables_dir();
    let written = save_table(&tables, "results", &result_rows)
        .and_then(|_| save_table(&tables, "sparsity", &sparsity_rows))
        .and_then(|_| save_table(&tables, "timings", &timing_rows));
    if let Err(e) = written {
        summary.record("tables".to_string(), &e);
    }

    result_rows.extend(sparsity_rows);
    (result_rows, summary)
}

/// Runs the six-setting ablation grid (and the sparse-weight sweep) on the
/// first configured random split and writes the `ablation` table.
///
/// Settings are trained sequentially in grid order with per-setting derived
/// seeds, so the table is reproducible bit-for-bit.
pub fn run_ablation(
    cfg: &MasterConfig,
    out: &OutPaths,
    manifest: &DatasetManifest,
) -> (Vec<ResultRow>, StageSummary) {
    let mut summary = StageSummary::new("ablate");
    let root = out.data_dir();

    let located = cfg
        .splits
        .iter()
        .enumerate()
        .find(|(_, s)| matches!(s.strategy, SplitStrategy::Random { .. }))
        .ok_or_else(|| Error::invalid("ablation needs a random split in the configuration"));
    let (split_idx, spec) = match located {
        Ok(v) => v,
        Err(e) => {
            summary.record("ablation".to_string(), &e);
            return (Vec::new(), summary);
        }
    };
    let split = match make_splits(manifest, spec) {
        Ok(s) => s,
        Err(e) => {
            summary.record(format!("split {}", spec.name), &e);
            return (Vec::new(), summary);
        }
    };
    let (train_entries, val_entries) = carve_val(
        split.train,
        cfg.val_fraction,
        derive_seed(cfg.seed, VAL_CARVE_LABEL, split_idx as u64),
    );

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut run_one = |label: String, srgcn: &SrGcnConfig, opts: &TrainOptions, seed: u64| {
        let result = (|| -> Result<ResultRow> {
            let (train_scs, train_failures) =
                build_scenarios(cfg, &root, &train_entries, srgcn, opts);
            let (val_scs, val_failures) = build_scenarios(cfg, &root, &val_entries, srgcn, opts);
            summary.failures.extend(train_failures);
            summary.failures.extend(val_failures);
            if train_scs.is_empty() {
                return Err(Error::invalid(format!(
                    "ablation {label} has no usable training scenarios"
                )));
            }
            let (model, records) = train_two_stage(srgcn, opts, &train_scs, &val_scs, seed)?;
            let stem_name = format!("ablation_{label}");
            save_model(&out.model_stem(&stem_name), &model, opts, None)?;
            save_train_log(&out.train_log(&stem_name), &records)?;

            let (ok, failures) = map_scenarios(&split.test, |entry| {
                let bundle = load_bundle(&root, entry)?;
                let predicted = predict_residual(
                    &model,
                    opts,
                    &bundle.preop,
                    &bundle.libr,
                    &bundle.meas,
                    bundle.corr_mesh(cfg.correspondence_target),
                )
                .map_err(|e| scenario_err(entry, e))?;
                let r = tre(&predicted, &bundle.gt_aligned).map_err(|e| scenario_err(entry, e))?;
                let s = split_errors(&r.per_vertex, &bundle.gt_aligned.surface_vertex_mask);
                Ok(MethodStat {
                    mean: r.mean,
                    edge: s.edge,
                    inner: s.inner,
                    runtime: 0.0,
                })
            });
            summary.failures.extend(failures);
            let stats: Vec<MethodStat> = ok.into_iter().map(|(_, s)| s).collect();
            let refs: Vec<&MethodStat> = stats.iter().collect();
            aggregate_row(&label, &spec.name, None, &refs, false).ok_or_else(|| {
                Error::invalid(format!("ablation {label} evaluated no test scenario"))
            })
        })();
        match result {
            Ok(row) => {
                rows.push(row);
                summary.succeeded += 1;
            }
            Err(e) => summary.record(format!("ablation {label}"), &e),
        }
    };

    for setting in AblationSetting::grid() {
        let opts = setting.train_options();
        run_one(
            setting.label(),
            &cfg.srgcn,
            &opts,
            derive_seed(cfg.seed, ABLATION_SEED_LABEL, setting.index as u64),
        );
    }
    let full_method = AblationSetting::grid()[5].train_options();
    for (i, &lambda) in cfg.lambda_sweep.iter().enumerate() {
        let mut srgcn = cfg.srgcn.clone();
        srgcn.lambda_sparse = lambda;
        run_one(
            format!("lambda_{lambda}"),
            &srgcn,
            &full_method,
            derive_seed(cfg.seed, LAMBDA_SEED_LABEL, i as u64),
        );
    }

    if let Err(e) = save_table(&out.tables_dir(), "ablation", &rows) {
        summary.record("tables".to_string(), &e);
    }
    (rows, summary)
}

/// Re-emits the aligned text form of every stored machine table.
pub fn report(out: &OutPaths) -> Result<Vec<String>> {
    let tables = out.tables_dir();
    let mut rendered = Vec::new();
    for stem in ["results", "sparsity", "timings", "ablation"] {
        let path = tables.join(format!("{stem}.jsonl"));
        if !path.exists() {
            continue;
        }
        let rows = crate::eval::tables::load_table(&path)?;
        save_table(&tables, stem, &rows)?;
        rendered.push(stem.to_string());
    }
    if rendered.is_empty() {
        return Err(Error::invalid(format!(
            "no tables found under {}; run evaluate or ablate first",
            tables.display()
        )));
    }
    Ok(rendered)
}

/// Runs the full experiment in order: dataset generation, rigid
/// initialization, deformable reconstruction, graph materialization,
/// training, prediction and evaluation. Persists the resolved configuration
/// and a run summary; per-scenario failures never abort the run.
pub fn run_pipeline(cfg: &MasterConfig, out_root: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let out = OutPaths::new(out_root);
    save_config(&out.config(), cfg)?;

    let manifest = gen_data(cfg, &out)?;
    let mut stages = vec![StageSummary {
        stage: "gen-data".to_string(),
        succeeded: manifest.scenarios.len(),
        failures: Vec::new(),
    }];
    stages.push(run_wicp(cfg, &out, &manifest));
    stages.push(run_libr(cfg, &out, &manifest));
    stages.push(build_graphs(cfg, &out, &manifest));
    stages.push(train_models(cfg, &out, &manifest));
    stages.push(register_predictions(cfg, &out, &manifest));
    let (_, eval_summary) = evaluate(cfg, &out, &manifest);
    stages.push(eval_summary);

    let summary = RunSummary {
        format_version: FORMAT_VERSION.to_string(),
        ok: stages.iter().all(StageSummary::ok),
        stages,
    };
    atomic_write_json(&out.summary(), &summary)?;
    Ok(summary)
}
