//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("tet {index} is degenerate (signed volume {volume:.3e})")]
    DegenerateTet { index: usize, volume: f64 },

    #[error("tet {index} references vertex {vertex} but mesh has {vertex_count} vertices")]
    TetIndexOutOfRange {
        index: usize,
        vertex: usize,
        vertex_count: usize,
    },

    #[error("tet {index} has repeated vertices {tet:?}")]
    RepeatedTetVertex { index: usize, tet: [usize; 4] },

    #[error("non-manifold face {face:?} shared by {count} tets")]
    NonManifoldFace { face: [usize; 3], count: usize },

    #[error("mesh topology mismatch: {detail}")]
    TopologyMismatch { detail: String },

    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("conjugate gradient did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    CgDidNotConverge { iterations: usize, residual: f64 },

    #[error("singular system in {context}")]
    SingularSystem { context: String },

    #[error("too few constraints: need at least {needed}, got {got}")]
    TooFewConstraints { needed: usize, got: usize },

    #[error("degenerate point configuration in {context}")]
    DegenerateConfiguration { context: String },

    #[error("newton solve did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    NewtonDidNotConverge { iterations: usize, residual: f64 },

    #[error("element {element} inverted during nonlinear solve")]
    InvertedElement { element: usize },

    #[error("FEM solve failed for control point {control_point}: {source}")]
    BasisSolve {
        control_point: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at stage {stage}, epoch {epoch}, step {step}")]
    NanLoss {
        stage: u8,
        epoch: usize,
        step: usize,
    },

    #[error("non-finite gradient for parameter {param}")]
    NanGradient { param: String },

    #[error("mesh generation failed for seed {seed}: {detail}")]
    MeshGen { seed: u64, detail: String },

    #[error("document format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("scenario {scenario} failed: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
