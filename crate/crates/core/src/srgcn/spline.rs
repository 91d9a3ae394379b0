//! Open-uniform B-spline bases and the spline graph-convolution layer.
//!
//! The convolution kernel for channel `l` is `g_l(u) = sum_p w_{p,l} B_p(u)`
//! where `B_p` are B-spline basis functions over the edge pseudo-coordinate
//! `u in [0, 1]`. Multi-dimensional pseudo-coordinates use the tensor
//! product of one-dimensional bases.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, TensorId};

/// Open-uniform B-spline basis of the given degree over `[0, 1]` with
/// `kernel_size` basis functions. Returns the `degree + 1` basis indices
/// with non-zero value at `u` together with the values; the values are
/// nonnegative and sum to 1. `u` outside `[0, 1]` is clamped (and flagged
/// in debug builds).
pub fn bspline_basis(u: f64, degree: usize, kernel_size: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if kernel_size < degree + 1 {
        return Err(Error::invalid(format!(
            "bspline_basis: kernel_size {kernel_size} < degree + 1 = {}",
            degree + 1
        )));
    }
    debug_assert!(
        (0.0..=1.0).contains(&u),
        "pseudo-coordinate {u} outside [0, 1]"
    );
    let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, 1.0) };

    let n = kernel_size;
    let d = degree;
    // Open-uniform knots: d+1 zeros, uniform interior, d+1 ones.
    let knot = |i: usize| -> f64 {
        if i <= d {
            0.0
        } else if i >= n {
            1.0
        } else {
            (i - d) as f64 / (n - d) as f64
        }
    };
    // Left-closed span lookup; u = 1 falls into the last span.
    let span = usize::min(d + (u * (n - d) as f64).floor() as usize, n - 1);

    // Cox-de Boor recursion over the d+1 bases alive on this span.
    let mut basis = vec![0.0; d + 1];
    let mut left = vec![0.0; d + 1];
    let mut right = vec![0.0; d + 1];
    basis[0] = 1.0;
    for j in 1..=d {
        left[j] = u - knot(span + 1 - j);
        right[j] = knot(span + j) - u;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = basis[r] / (right[r + 1] + left[j - r]);
            basis[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        basis[j] = saved;
    }
    Ok(((span - d..=span).collect(), basis))
}

/// Precomputed per-edge spline structure of a graph for one kernel setting:
/// directed edges plus the flattened tensor-product basis entries, with
/// kernel cells remapped to the compact list of cells actually touched.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTensors {
    pub n_nodes: usize,
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    /// Sorted kernel-cell indices that occur in `basis_idx` (global cells).
    pub used_cells: Vec<usize>,
    /// Per edge x per non-zero basis entry: position into `used_cells`.
    pub basis_idx: Arc<Vec<usize>>,
    pub basis_val: Arc<Vec<f64>>,
}

impl EdgeTensors {
    /// Builds edge tensors from directed edges and row-major pseudo
    /// coordinates (`pseudo_dim` per edge).
    pub fn new(
        edges: &[[usize; 2]],
        edge_attrs: &[f64],
        pseudo_dim: usize,
        degree: usize,
        kernel_size: usize,
        n_nodes: usize,
    ) -> Result<Self> {
        if pseudo_dim == 0 {
            return Err(Error::invalid("EdgeTensors: pseudo_dim must be >= 1"));
        }
        if edge_attrs.len() != edges.len() * pseudo_dim {
            return Err(Error::ShapeMismatch {
                op: "EdgeTensors",
                expected: format!("{} edge attributes", edges.len() * pseudo_dim),
                got: format!("{}", edge_attrs.len()),
            });
        }
        for &[s, d] in edges {
            if s >= n_nodes || d >= n_nodes {
                return Err(Error::IndexOutOfRange {
                    op: "EdgeTensors",
                    index: s.max(d),
                    len: n_nodes,
                });
            }
        }
        let nb_dim = degree + 1;
        let nb: usize = nb_dim.pow(pseudo_dim as u32);
        let mut src = Vec::with_capacity(edges.len());
        let mut dst = Vec::with_capacity(edges.len());
        let mut global_idx = Vec::with_capacity(edges.len() * nb);
        let mut basis_val = Vec::with_capacity(edges.len() * nb);
        for (e, &[s, d]) in edges.iter().enumerate() {
            src.push(s);
            dst.push(d);
            let dims: Vec<(Vec<usize>, Vec<f64>)> = (0..pseudo_dim)
                .map(|k| bspline_basis(edge_attrs[e * pseudo_dim + k], degree, kernel_size))
                .collect::<Result<_>>()?;
            // Tensor product over dimensions, row-major cell numbering.
            let mut digits = vec![0usize; pseudo_dim];
            for combo in 0..nb {
                let mut rem = combo;
                for k in (0..pseudo_dim).rev() {
                    digits[k] = rem % nb_dim;
                    rem /= nb_dim;
                }
                let mut cell = 0usize;
                let mut val = 1.0;
                for k in 0..pseudo_dim {
                    let (idx, vals) = &dims[k];
                    cell = cell * kernel_size + idx[digits[k]];
                    val *= vals[digits[k]];
                }
                global_idx.push(cell);
                basis_val.push(val);
            }
        }
        let mut used_cells: Vec<usize> = global_idx.clone();
        used_cells.sort_unstable();
        used_cells.dedup();
        let basis_idx: Vec<usize> = global_idx
            .iter()
            .map(|c| used_cells.binary_search(c).expect("cell present"))
            .collect();
        Ok(EdgeTensors {
            n_nodes,
            src: Arc::new(src),
            dst: Arc::new(dst),
            used_cells,
            basis_idx: Arc::new(basis_idx),
            basis_val: Arc::new(basis_val),
        })
    }
}

/// Channel dimensions of one spline convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Total kernel cells, `kernel_size^pseudo_dim`.
    pub n_kernel: usize,
}

fn weight_name(prefix: &str, cell: usize) -> String {
    format!("{prefix}.w{cell:03}")
}

/// Creates the parameters of one spline convolution layer: `n_kernel`
/// weight matrices, a root weight matrix, and a bias vector. Weights are
/// uniform Glorot-initialized, the bias starts at zero.
pub fn init_conv_params(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    dims: ConvDims,
) -> Result<()> {
    let a = (6.0 / (dims.in_channels + dims.out_channels) as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-a..a)).collect() };
    let shape = (dims.in_channels, dims.out_channels);
    for cell in 0..dims.n_kernel {
        let data = draw(shape.0 * shape.1);
        store.insert(&weight_name(prefix, cell), shape, data)?;
    }
    let root = draw(shape.0 * shape.1);
    store.insert(&format!("{prefix}.root"), shape, root)?;
    store.insert(
        &format!("{prefix}.bias"),
        (1, dims.out_channels),
        vec![0.0; dims.out_channels],
    )?;
    Ok(())
}

/// Applies one spline convolution on the tape:
/// `out_i = root . x_i + mean over in-edges (j -> i) of (sum_p B_p(u_ji) w_p) . x_j + bias`.
/// Vertices without in-edges receive `root . x_i + bias`.
pub fn conv_forward(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    prefix: &str,
    x: TensorId,
    edges: &EdgeTensors,
) -> Result<TensorId> {
    let lookup = |name: String| -> Result<TensorId> {
        ids.get(&name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("conv_forward: missing parameter {name:?}")))
    };
    let root = lookup(format!("{prefix}.root"))?;
    let bias = lookup(format!("{prefix}.bias"))?;
    let mut out = tape.matmul(x, root)?;
    if !edges.src.is_empty() {
        let mut inputs = Vec::with_capacity(edges.used_cells.len());
        for &cell in &edges.used_cells {
            let w = lookup(weight_name(prefix, cell))?;
            inputs.push(tape.matmul(x, w)?);
        }
        let mixed = tape.edge_mix(
            &inputs,
            edges.src.clone(),
            edges.dst.clone(),
            edges.basis_idx.clone(),
            edges.basis_val.clone(),
            edges.n_nodes,
        )?;
        out = tape.add(out, mixed)?;
    }
    tape.add(out, bias)
}
