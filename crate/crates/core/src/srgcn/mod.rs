//! Dual-branch spline-residual graph network (SR-GCN).
//!
//! The bipartite branch encodes measurement/mesh correspondences; the
//! liver-mesh branch predicts the per-vertex residual between the
//! linear-physics (LIBR) solution and the true deformation, with the
//! bipartite features averaged into the mesh features at every
//! convolution layer.

pub mod spline;
mod train;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::io::{atomic_write_json, read_json, FORMAT_VERSION};
use crate::mesh::{
    build_bipartite_graph, build_liver_graph, BipartiteGraph, LiverGraph, PseudoMode,
    SparseMeasurement, TetMesh,
};
use crate::registration::apply_deformation;
use crate::tensor::{ParamStore, Tape, TensorId};

pub use spline::{bspline_basis, conv_forward, init_conv_params, ConvDims, EdgeTensors};
pub use train::{save_train_log, train_two_stage, TrainRecord};

/// Nonlinearity applied after the encoder and after each convoluter
/// (never after the decoder).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Elu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        match self {
            Activation::Elu => tape.elu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Architecture and optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrGcnConfig {
    /// Feature width of encoder outputs and convoluters.
    pub hidden: usize,
    /// Number of spline convoluters per branch (N_c).
    pub n_conv: usize,
    /// B-spline degree of every layer.
    pub degree: usize,
    /// Basis functions per pseudo-coordinate dimension.
    pub kernel_size: usize,
    /// Pseudo-coordinate construction shared with graph building.
    pub pseudo_mode: PseudoMode,
    /// Nonlinearity between layers.
    pub activation: Activation,
    /// Weight of the sparse-supervision loss term.
    pub lambda_sparse: f64,
    /// Nearest neighbors per measurement point in the bipartite graph.
    pub n_top: usize,
    /// Adam learning rate (both stages).
    pub lr: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Network-internal coordinate scale (per mm). Graph attributes and
    /// loss targets are multiplied by this; predictions are divided by it.
    /// Keeps features near unit range for millimeter-scale organs.
    pub coord_scale: f64,
}

impl Default for SrGcnConfig {
    fn default() -> Self {
        SrGcnConfig {
            hidden: 64,
            n_conv: 3,
            degree: 1,
            kernel_size: 5,
            pseudo_mode: PseudoMode::CanonicalOrdinal,
            activation: Activation::Elu,
            lambda_sparse: 1.0,
            n_top: 3,
            lr: 1e-3,
            epochs_stage1: 200,
            epochs_stage2: 200,
            coord_scale: 0.01,
        }
    }
}

impl SrGcnConfig {
    pub fn n_kernel(&self) -> usize {
        self.kernel_size.pow(self.pseudo_mode.dim() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::invalid("SrGcnConfig: hidden width must be >= 1"));
        }
        if self.kernel_size < self.degree + 1 {
            return Err(Error::invalid(format!(
                "SrGcnConfig: kernel_size {} < degree + 1 = {}",
                self.kernel_size,
                self.degree + 1
            )));
        }
        if self.n_top == 0 {
            return Err(Error::invalid("SrGcnConfig: n_top must be >= 1"));
        }
        if !self.lambda_sparse.is_finite() || self.lambda_sparse < 0.0 {
            return Err(Error::invalid("SrGcnConfig: lambda_sparse must be >= 0"));
        }
        if !self.coord_scale.is_finite() || self.coord_scale <= 0.0 {
            return Err(Error::invalid("SrGcnConfig: coord_scale must be > 0"));
        }
        Ok(())
    }
}

/// Which mesh the predicted residual is added to (and measured against).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualBase {
    /// Residual to the LIBR solution; prediction = LIBR mesh + y_v.
    #[default]
    Libr,
    /// Residual to the preoperative mesh; prediction = preop mesh + y_v.
    Preop,
}

/// Input/supervision toggles; the default is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    /// Aggregate bipartite features into the mesh branch (and run stage 1).
    pub use_bipartite: bool,
    /// Vertex attributes carry the LIBR coordinates in their second half;
    /// otherwise the preoperative coordinates are repeated.
    pub attrs_include_libr: bool,
    /// Base mesh the network's output is a residual to.
    pub base: ResidualBase,
    /// Add the sparse-supervision term to the stage-2 loss.
    pub use_sparse: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            use_bipartite: true,
            attrs_include_libr: true,
            base: ResidualBase::Libr,
            use_sparse: true,
        }
    }
}

/// Trained (or freshly initialized) model: hyperparameters plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SrGcnModel {
    pub config: SrGcnConfig,
    pub params: ParamStore,
}

pub const BIPARTITE_PREFIX: &str = "b_";
pub const MESH_PREFIX: &str = "m_";

impl SrGcnModel {
    /// Initializes both branches with seeded Glorot-uniform weights.
    pub fn init(config: SrGcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let k = config.n_kernel();
        let dims = |i, o| ConvDims {
            in_channels: i,
            out_channels: o,
            n_kernel: k,
        };
        init_conv_params(&mut params, &mut rng, "b_enc", dims(3, h))?;
        for l in 0..config.n_conv {
            init_conv_params(&mut params, &mut rng, &format!("b_conv{l:02}"), dims(h, h))?;
        }
        init_conv_params(&mut params, &mut rng, "b_dec", dims(h, 3))?;
        init_conv_params(&mut params, &mut rng, "m_enc", dims(6, h))?;
        for l in 0..config.n_conv {
            init_conv_params(&mut params, &mut rng, &format!("m_conv{l:02}"), dims(h, h))?;
        }
        init_conv_params(&mut params, &mut rng, "m_dec", dims(h, 3))?;
        Ok(SrGcnModel { config, params })
    }
}

/// Binds every parameter of `store` onto the tape; names accepted by
/// `trainable` become differentiation targets, the rest are constants.
pub fn bind_params(
    tape: &mut Tape,
    store: &ParamStore,
    trainable: impl Fn(&str) -> bool,
) -> Result<BTreeMap<String, TensorId>> {
    let mut ids = BTreeMap::new();
    for (name, p) in &store.params {
        let id = tape.leaf(p.data.clone(), p.shape, trainable(name))?;
        ids.insert(name.clone(), id);
    }
    Ok(ids)
}

/// Collects gradients of all bound parameters that received one.
pub fn collect_grads(
    tape: &Tape,
    ids: &BTreeMap<String, TensorId>,
    trainable: impl Fn(&str) -> bool,
) -> BTreeMap<String, Vec<f64>> {
    let mut grads = BTreeMap::new();
    for (name, &id) in ids {
        if trainable(name) {
            if let Some(g) = tape.grad(id) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
    }
    grads
}

/// Liver-mesh graph lowered to tensors plus precomputed spline structure.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTensors {
    pub n_vertices: usize,
    /// Row-major `N_p x 6`.
    pub attrs: Vec<f64>,
    pub edges: EdgeTensors,
}

impl MeshTensors {
    pub fn new(graph: &LiverGraph, cfg: &SrGcnConfig) -> Result<Self> {
        let n = graph.vertex_count();
        let edges = EdgeTensors::new(
            &graph.edges,
            &graph.edge_attrs,
            graph.pseudo_dim,
            cfg.degree,
            cfg.kernel_size,
            n,
        )?;
        Ok(MeshTensors {
            n_vertices: n,
            attrs: graph
                .vertex_attrs
                .iter()
                .map(|v| v * cfg.coord_scale)
                .collect(),
            edges,
        })
    }
}

/// Bipartite graph lowered to a single node set (s-nodes first, then
/// v-nodes) with both edge directions, plus the mesh rows of the v-nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteTensors {
    pub n_s: usize,
    /// Mesh-vertex row per v-node.
    pub v_indices: Vec<usize>,
    /// Row-major `(N_s + N_v) x 3`: measurement then preop coordinates.
    pub attrs: Vec<f64>,
    pub edges: EdgeTensors,
    /// Per original (s, v) edge: the mesh row of its v endpoint.
    pub edge_mesh_rows: Vec<usize>,
    /// Per original (s, v) edge: its s-node row.
    pub edge_s_rows: Vec<usize>,
}

impl BipartiteTensors {
    pub fn new(graph: &BipartiteGraph, cfg: &SrGcnConfig) -> Result<Self> {
        let n_s = graph.s_count();
        let n_nodes = n_s + graph.v_count();
        let mut attrs = Vec::with_capacity(n_nodes * 3);
        attrs.extend(graph.s_attrs.iter().map(|v| v * cfg.coord_scale));
        attrs.extend(graph.v_attrs.iter().map(|v| v * cfg.coord_scale));

        // Double each (s, v) pair into both directions, sharing its pseudo
        // attributes, so information flows measurement <-> mesh.
        let dim = graph.pseudo_dim;
        let mut directed = Vec::with_capacity(graph.edges.len() * 2);
        let mut dir_attrs = Vec::with_capacity(graph.edges.len() * 2 * dim);
        for (e, &[s, v]) in graph.edges.iter().enumerate() {
            let vg = n_s + v;
            directed.push([s, vg]);
            directed.push([vg, s]);
            for _ in 0..2 {
                dir_attrs.extend_from_slice(&graph.edge_attrs[e * dim..(e + 1) * dim]);
            }
        }
        let edges = EdgeTensors::new(
            &directed,
            &dir_attrs,
            dim,
            cfg.degree,
            cfg.kernel_size,
            n_nodes,
        )?;
        let edge_mesh_rows = graph
            .edges
            .iter()
            .map(|&[_, v]| graph.v_indices[v])
            .collect();
        let edge_s_rows = graph.edges.iter().map(|&[s, _]| s).collect();
        Ok(BipartiteTensors {
            n_s,
            v_indices: graph.v_indices.clone(),
            attrs,
            edges,
            edge_mesh_rows,
            edge_s_rows,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_s + self.v_indices.len()
    }
}

/// Runs the bipartite branch. Returns the combined-node feature maps
/// `x^0 .. x^{N_c}` and the reconstruction `y_b`.
pub fn bipartite_forward(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    cfg: &SrGcnConfig,
    bip: &BipartiteTensors,
) -> Result<(Vec<TensorId>, TensorId)> {
    let n = bip.n_nodes();
    let attrs = tape.constant(bip.attrs.clone(), (n, 3))?;
    let mut x = conv_forward(tape, ids, "b_enc", attrs, &bip.edges)?;
    x = cfg.activation.apply(tape, x)?;
    let mut layers = vec![x];
    for l in 0..cfg.n_conv {
        x = conv_forward(tape, ids, &format!("b_conv{l:02}"), x, &bip.edges)?;
        x = cfg.activation.apply(tape, x)?;
        layers.push(x);
    }
    let y_b = conv_forward(tape, ids, "b_dec", x, &bip.edges)?;
    Ok((layers, y_b))
}

/// Extracts the v-node rows of per-layer combined bipartite features.
pub fn bipartite_v_features(
    tape: &mut Tape,
    layers: &[TensorId],
    bip: &BipartiteTensors,
) -> Result<Vec<TensorId>> {
    let idx: Arc<Vec<usize>> = Arc::new((bip.n_s..bip.n_nodes()).collect());
    layers
        .iter()
        .map(|&x| tape.gather_rows(x, idx.clone()))
        .collect()
}

/// Runs the liver-mesh branch. When bipartite features are given, the
/// mesh features are averaged with the zero-filled scatter of the
/// bipartite v-features before every convoluter. Returns `y_v` (`N_p x 3`).
pub fn mesh_forward(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    cfg: &SrGcnConfig,
    mesh: &MeshTensors,
    bip_v_feats: Option<(&[TensorId], &[usize])>,
) -> Result<TensorId> {
    let n_p = mesh.n_vertices;
    if let Some((feats, v_rows)) = bip_v_feats {
        if feats.len() < cfg.n_conv {
            return Err(Error::ShapeMismatch {
                op: "mesh_forward",
                expected: format!("{} bipartite feature layers", cfg.n_conv),
                got: format!("{}", feats.len()),
            });
        }
        for &r in v_rows {
            if r >= n_p {
                return Err(Error::IndexOutOfRange {
                    op: "mesh_forward",
                    index: r,
                    len: n_p,
                });
            }
        }
    }
    let attrs = tape.constant(mesh.attrs.clone(), (n_p, 6))?;
    let mut x = conv_forward(tape, ids, "m_enc", attrs, &mesh.edges)?;
    x = cfg.activation.apply(tape, x)?;
    for l in 0..cfg.n_conv {
        if let Some((feats, v_rows)) = bip_v_feats {
            let tilde = tape.scatter_mean(feats[l], Arc::new(v_rows.to_vec()), n_p)?;
            let sum = tape.add(x, tilde)?;
            x = tape.scale(sum, 0.5)?;
        }
        x = conv_forward(tape, ids, &format!("m_conv{l:02}"), x, &mesh.edges)?;
        x = cfg.activation.apply(tape, x)?;
    }
    conv_forward(tape, ids, "m_dec", x, &mesh.edges)
}

/// Reconstruction loss of the bipartite branch: mean squared error between
/// `y_b` and the input vertex attributes.
pub fn loss_bipartite(
    tape: &mut Tape,
    y_b: TensorId,
    bip: &BipartiteTensors,
) -> Result<TensorId> {
    let n = bip.n_nodes();
    let target = tape.constant(bip.attrs.clone(), (n, 3))?;
    tape.mse(y_b, target)
}

/// Residual loss: mean squared error between `y_v` and the target residual
/// field (true minus base coordinates, row-major `N_p x 3`).
pub fn loss_residual(
    tape: &mut Tape,
    y_v: TensorId,
    residual_target: &[f64],
    n_p: usize,
) -> Result<TensorId> {
    let target = tape.constant(residual_target.to_vec(), (n_p, 3))?;
    tape.mse(y_v, target)
}

/// Sparse-supervision loss: mean over bipartite edges (s, v) of
/// `|| B_s[s] - base[v] - y_v[v] ||^2`, where `sparse_target` holds the
/// per-edge `B_s[s] - base[v]` rows.
pub fn loss_sparse(
    tape: &mut Tape,
    y_v: TensorId,
    edge_mesh_rows: &[usize],
    sparse_target: &[f64],
) -> Result<TensorId> {
    if sparse_target.len() != edge_mesh_rows.len() * 3 {
        return Err(Error::ShapeMismatch {
            op: "loss_sparse",
            expected: format!("{} target values", edge_mesh_rows.len() * 3),
            got: format!("{}", sparse_target.len()),
        });
    }
    let pred = tape.gather_rows(y_v, Arc::new(edge_mesh_rows.to_vec()))?;
    let target = tape.constant(sparse_target.to_vec(), (edge_mesh_rows.len(), 3))?;
    let per_entry = tape.mse(pred, target)?;
    // The per-edge squared norm sums 3 components, so the edge mean is
    // 3x the entry mean.
    tape.scale(per_entry, 3.0)
}

/// Combined stage-2 loss `L_m = L_residual + lambda * L_sparse`.
pub fn loss_total(
    tape: &mut Tape,
    l_residual: TensorId,
    l_sparse: Option<TensorId>,
    lambda: f64,
) -> Result<TensorId> {
    match l_sparse {
        None => Ok(l_residual),
        Some(ls) => {
            let scaled = tape.scale(ls, lambda)?;
            tape.add(l_residual, scaled)
        }
    }
}

/// One scenario lowered to training tensors.
#[derive(Debug, Clone)]
pub struct TrainScenario {
    pub name: String,
    pub mesh: MeshTensors,
    pub bipartite: Option<BipartiteTensors>,
    /// Row-major `N_p x 3` coordinates of the residual base mesh (mm).
    pub base_vertices: Vec<f64>,
    /// Row-major `N_p x 3` coordinates of the true deformed mesh (mm).
    pub gt_vertices: Vec<f64>,
    /// `(gt - base) * coord_scale` — the network-unit regression target.
    pub residual_target: Vec<f64>,
    /// Per bipartite edge: mesh row of the v endpoint (empty without sparse).
    pub sparse_rows: Vec<usize>,
    /// Per bipartite edge: `(B_s[s] - base[v]) * coord_scale` rows
    /// (empty without sparse).
    pub sparse_target: Vec<f64>,
}

fn flatten_vertices(mesh: &TetMesh) -> Vec<f64> {
    mesh.vertices.iter().flatten().copied().collect()
}

/// Lowers one scenario into training tensors under the given options.
/// `corr_mesh` is the mesh the bipartite correspondences are built against.
pub fn build_train_scenario(
    name: &str,
    preop: &TetMesh,
    gt: &TetMesh,
    libr: &TetMesh,
    meas: &SparseMeasurement,
    corr_mesh: &TetMesh,
    cfg: &SrGcnConfig,
    opts: &TrainOptions,
) -> Result<TrainScenario> {
    preop.check_same_topology(gt)?;
    preop.check_same_topology(libr)?;
    let attr_mesh = if opts.attrs_include_libr { libr } else { preop };
    let liver = build_liver_graph(preop, attr_mesh, cfg.pseudo_mode)?;
    let mesh = MeshTensors::new(&liver, cfg)?;

    let base_mesh = match opts.base {
        ResidualBase::Libr => libr,
        ResidualBase::Preop => preop,
    };
    let base_vertices = flatten_vertices(base_mesh);
    let gt_vertices = flatten_vertices(gt);
    let residual_target: Vec<f64> = gt_vertices
        .iter()
        .zip(&base_vertices)
        .map(|(g, b)| (g - b) * cfg.coord_scale)
        .collect();

    let bipartite = if opts.use_bipartite || opts.use_sparse {
        let graph = build_bipartite_graph(meas, corr_mesh, preop, cfg.n_top, cfg.pseudo_mode)?;
        Some(BipartiteTensors::new(&graph, cfg)?)
    } else {
        None
    };

    let (sparse_rows, sparse_target) = match (&bipartite, opts.use_sparse) {
        (Some(bip), true) => {
            // bip.attrs are already in network units; scale the base to match.
            let mut t = Vec::with_capacity(bip.edge_mesh_rows.len() * 3);
            for (&s, &v) in bip.edge_s_rows.iter().zip(&bip.edge_mesh_rows) {
                for c in 0..3 {
                    t.push(bip.attrs[s * 3 + c] - base_vertices[v * 3 + c] * cfg.coord_scale);
                }
            }
            (bip.edge_mesh_rows.clone(), t)
        }
        _ => (Vec::new(), Vec::new()),
    };

    Ok(TrainScenario {
        name: name.to_string(),
        mesh,
        bipartite: if opts.use_bipartite { bipartite } else { None },
        base_vertices,
        gt_vertices,
        residual_target,
        sparse_rows,
        sparse_target,
    })
}

/// Mean per-vertex error of `base + y` against the scenario's true mesh;
/// `y_v` must already be in millimeters.
pub fn scenario_tre(y_v: &[f64], sc: &TrainScenario) -> f64 {
    let n = sc.mesh.n_vertices;
    let mut sum = 0.0;
    for i in 0..n {
        let mut d2 = 0.0;
        for c in 0..3 {
            let d = sc.base_vertices[i * 3 + c] + y_v[i * 3 + c] - sc.gt_vertices[i * 3 + c];
            d2 += d * d;
        }
        sum += d2.sqrt();
    }
    sum / n as f64
}

/// Runs the full model without gradients and returns the predicted
/// residual in millimeters (the network output divided by `coord_scale`).
pub fn forward_y(
    model: &SrGcnModel,
    opts: &TrainOptions,
    mesh: &MeshTensors,
    bipartite: Option<&BipartiteTensors>,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &model.params, |_| false)?;
    let y_v = match (opts.use_bipartite, bipartite) {
        (true, Some(bip)) => {
            let (layers, _) = bipartite_forward(&mut tape, &ids, cfg, bip)?;
            let feats = bipartite_v_features(&mut tape, &layers[..cfg.n_conv], bip)?;
            mesh_forward(
                &mut tape,
                &ids,
                cfg,
                mesh,
                Some((&feats, &bip.v_indices)),
            )?
        }
        (true, None) => {
            return Err(Error::invalid(
                "forward_y: model uses the bipartite branch but no bipartite graph was given",
            ))
        }
        (false, _) => mesh_forward(&mut tape, &ids, cfg, mesh, None)?,
    };
    Ok(tape
        .value(y_v)
        .iter()
        .map(|v| v / cfg.coord_scale)
        .collect())
}

/// Applies a trained model to one scenario: builds the graphs, predicts the
/// residual, and returns the corrected (registered) mesh.
pub fn predict_residual(
    model: &SrGcnModel,
    opts: &TrainOptions,
    preop: &TetMesh,
    libr: &TetMesh,
    meas: &SparseMeasurement,
    corr_mesh: &TetMesh,
) -> Result<TetMesh> {
    let cfg = &model.config;
    let attr_mesh = if opts.attrs_include_libr { libr } else { preop };
    let liver = build_liver_graph(preop, attr_mesh, cfg.pseudo_mode)?;
    let mesh = MeshTensors::new(&liver, cfg)?;
    let bipartite = if opts.use_bipartite {
        let graph = build_bipartite_graph(meas, corr_mesh, preop, cfg.n_top, cfg.pseudo_mode)?;
        Some(BipartiteTensors::new(&graph, cfg)?)
    } else {
        None
    };
    let y = forward_y(model, opts, &mesh, bipartite.as_ref())?;
    let base_mesh = match opts.base {
        ResidualBase::Libr => libr,
        ResidualBase::Preop => preop,
    };
    apply_deformation(base_mesh, &y)
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    format_version: String,
    config: SrGcnConfig,
    options: TrainOptions,
    manifest_hash: Option<String>,
}

/// Persists a model as `<stem>.params` (parameters) and `<stem>.config`
/// (hyperparameters, training options, dataset manifest hash).
pub fn save_model(
    stem: &Path,
    model: &SrGcnModel,
    options: &TrainOptions,
    manifest_hash: Option<&str>,
) -> Result<()> {
    crate::tensor::param::save_params(&stem.with_extension("params"), &model.params)?;
    atomic_write_json(
        &stem.with_extension("config"),
        &ModelSidecar {
            format_version: FORMAT_VERSION.to_string(),
            config: model.config.clone(),
            options: *options,
            manifest_hash: manifest_hash.map(str::to_string),
        },
    )
}

/// Loads a model saved by `save_model`.
pub fn load_model(stem: &Path) -> Result<(SrGcnModel, TrainOptions, Option<String>)> {
    let config_path = stem.with_extension("config");
    let sidecar: ModelSidecar = read_json(&config_path)?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: config_path.display().to_string(),
            detail: format!(
                "unsupported format_version {:?}, expected {FORMAT_VERSION:?}",
                sidecar.format_version
            ),
        });
    }
    sidecar.config.validate()?;
    let params = crate::tensor::param::load_params(&stem.with_extension("params"))?;
    Ok((
        SrGcnModel {
            config: sidecar.config,
            params,
        },
        sidecar.options,
        sidecar.manifest_hash,
    ))
}

#[cfg(test)]
mod tests;
