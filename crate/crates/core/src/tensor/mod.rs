//! Dense-tensor computation with reverse-mode differentiation.
//!
//! A `Tape` records every operation as a node in a define-by-run graph over
//! row-major 2-D double-precision tensors. `backward` replays the record in
//! reverse node order, which makes gradient accumulation deterministic.

pub mod param;

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

pub use param::{adam_step, AdamState, ParamStore, Parameter};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Shape of a 2-D tensor, `(rows, cols)`. Scalars are `(1, 1)`.
pub type Shape = (usize, usize);

fn fmt_shape(s: Shape) -> String {
    format!("({}, {})", s.0, s.1)
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    AddRowBroadcast(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Concat(TensorId, TensorId),
    GatherRows(TensorId, Arc<Vec<usize>>),
    ScatterMean {
        values: TensorId,
        target_rows: Arc<Vec<usize>>,
        inv_count: Arc<Vec<f64>>,
    },
    Elu(TensorId),
    Relu(TensorId),
    Mse(TensorId, TensorId),
    ScaleRows(TensorId, Arc<Vec<f64>>),
    EdgeMix {
        inputs: Vec<TensorId>,
        src: Arc<Vec<usize>>,
        dst: Arc<Vec<usize>>,
        basis_idx: Arc<Vec<usize>>,
        basis_val: Arc<Vec<f64>>,
        inv_deg: Arc<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: TensorId) -> Shape {
        self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    /// Scalar value of a `(1, 1)` tensor.
    pub fn scalar(&self, t: TensorId) -> Result<f64> {
        let node = &self.nodes[t.0];
        if node.data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scalar",
                expected: "(1, 1)".to_string(),
                got: fmt_shape(node.shape),
            });
        }
        Ok(node.data[0])
    }

    /// Gradient of the last `backward` call with respect to `t`, if `t`
    /// requires gradients.
    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    fn push(&mut self, shape: Shape, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.0 * shape.1);
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Records a leaf tensor. `requires_grad` marks it as a differentiation
    /// target.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Shape, requires_grad: bool) -> Result<TensorId> {
        if data.len() != shape.0 * shape.1 {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                expected: format!("{} values for shape {}", shape.0 * shape.1, fmt_shape(shape)),
                got: format!("{}", data.len()),
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Shape) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: format!("inner dimensions to agree, lhs {}", fmt_shape(sa)),
                got: format!("rhs {}", fmt_shape(sb)),
            });
        }
        let shape = (sa.0, sb.1);
        let mut out = vec![0.0; shape.0 * shape.1];
        gemm(
            false,
            false,
            &self.nodes[a.0].data,
            sa,
            &self.nodes[b.0].data,
            sb,
            &mut out,
        );
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, rg, Op::MatMul(a, b)))
    }

    /// Elementwise sum; also accepts a `(1, c)` right operand broadcast over
    /// the rows of the left one.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
            let rg = self.needs(a) || self.needs(b);
            return Ok(self.push(sa, data, rg, Op::Add(a, b)));
        }
        if sb == (1, sa.1) {
            let cols = sa.1;
            let bd = &self.nodes[b.0].data;
            let data: Vec<f64> = self.nodes[a.0]
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bd[i % cols])
                .collect();
            let rg = self.needs(a) || self.needs(b);
            return Ok(self.push(sa, data, rg, Op::AddRowBroadcast(a, b)));
        }
        Err(Error::ShapeMismatch {
            op: "add",
            expected: format!("{} or (1, {})", fmt_shape(sa), sa.1),
            got: fmt_shape(sb),
        })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "sub",
                expected: fmt_shape(sa),
                got: fmt_shape(sb),
            });
        }
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(sa, data, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                expected: fmt_shape(sa),
                got: fmt_shape(sb),
            });
        }
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(sa, data, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let sa = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let rg = self.needs(a);
        Ok(self.push(sa, data, rg, Op::Scale(a, factor)))
    }

    /// Concatenation along the last (column) axis.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                expected: format!("matching row counts, lhs {}", fmt_shape(sa)),
                got: fmt_shape(sb),
            });
        }
        let shape = (sa.0, sa.1 + sb.1);
        let mut data = Vec::with_capacity(shape.0 * shape.1);
        for r in 0..sa.0 {
            data.extend_from_slice(&self.nodes[a.0].data[r * sa.1..(r + 1) * sa.1]);
            data.extend_from_slice(&self.nodes[b.0].data[r * sb.1..(r + 1) * sb.1]);
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, rg, Op::Concat(a, b)))
    }

    pub fn gather_rows(&mut self, a: TensorId, indices: Arc<Vec<usize>>) -> Result<TensorId> {
        let sa = self.shape(a);
        for &i in indices.iter() {
            if i >= sa.0 {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: sa.0,
                });
            }
        }
        let shape = (indices.len(), sa.1);
        let mut data = Vec::with_capacity(shape.0 * shape.1);
        for &i in indices.iter() {
            data.extend_from_slice(&self.nodes[a.0].data[i * sa.1..(i + 1) * sa.1]);
        }
        let rg = self.needs(a);
        Ok(self.push(shape, data, rg, Op::GatherRows(a, indices)))
    }

    /// Averages rows of `values` into `out_rows` buckets given per-row
    /// targets; rows of the output that receive no contribution are zero.
    pub fn scatter_mean(
        &mut self,
        values: TensorId,
        target_rows: Arc<Vec<usize>>,
        out_rows: usize,
    ) -> Result<TensorId> {
        let sv = self.shape(values);
        if target_rows.len() != sv.0 {
            return Err(Error::ShapeMismatch {
                op: "scatter_mean",
                expected: format!("{} target rows", sv.0),
                got: format!("{}", target_rows.len()),
            });
        }
        let mut counts = vec![0.0f64; out_rows];
        for &t in target_rows.iter() {
            if t >= out_rows {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_mean",
                    index: t,
                    len: out_rows,
                });
            }
            counts[t] += 1.0;
        }
        let inv_count: Arc<Vec<f64>> = Arc::new(
            counts
                .iter()
                .map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 })
                .collect(),
        );
        let cols = sv.1;
        let mut data = vec![0.0; out_rows * cols];
        for (r, &t) in target_rows.iter().enumerate() {
            let row = &self.nodes[values.0].data[r * cols..(r + 1) * cols];
            for (c, &v) in row.iter().enumerate() {
                data[t * cols + c] += v;
            }
        }
        for t in 0..out_rows {
            for c in 0..cols {
                data[t * cols + c] *= inv_count[t];
            }
        }
        let rg = self.needs(values);
        Ok(self.push(
            (out_rows, cols),
            data,
            rg,
            Op::ScatterMean {
                values,
                target_rows,
                inv_count,
            },
        ))
    }

    /// Exponential linear unit with alpha = 1.
    pub fn elu(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 })
            .collect();
        let rg = self.needs(a);
        Ok(self.push(sa, data, rg, Op::Elu(a)))
    }

    /// Rectified linear unit.
    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.needs(a);
        Ok(self.push(sa, data, rg, Op::Relu(a)))
    }

    /// Mean squared error over all entries, a `(1, 1)` scalar.
    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::ShapeMismatch {
                op: "mse",
                expected: fmt_shape(sp),
                got: fmt_shape(st),
            });
        }
        let n = (sp.0 * sp.1) as f64;
        let sum: f64 = self.nodes[pred.0]
            .data
            .iter()
            .zip(&self.nodes[target.0].data)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push((1, 1), vec![sum / n], rg, Op::Mse(pred, target)))
    }

    /// Multiplies each row by a fixed (non-differentiated) factor.
    pub fn scale_rows(&mut self, a: TensorId, factors: Arc<Vec<f64>>) -> Result<TensorId> {
        let sa = self.shape(a);
        if factors.len() != sa.0 {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                expected: format!("{} factors", sa.0),
                got: format!("{}", factors.len()),
            });
        }
        let cols = sa.1;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * factors[i / cols])
            .collect();
        let rg = self.needs(a);
        Ok(self.push(sa, data, rg, Op::ScaleRows(a, factors)))
    }

    /// Fused edge aggregation for spline convolutions.
    ///
    /// `inputs[p]` holds the source features already transformed by the p-th
    /// kernel weight matrix. For each edge `e` the rows `inputs[p][src[e]]`
    /// are combined with the edge's non-zero basis entries
    /// (`basis_idx`/`basis_val`, `nb` entries per edge), accumulated into row
    /// `dst[e]`, and finally averaged over each destination's in-degree.
    /// Destinations without in-edges yield zero rows.
    pub fn edge_mix(
        &mut self,
        inputs: &[TensorId],
        src: Arc<Vec<usize>>,
        dst: Arc<Vec<usize>>,
        basis_idx: Arc<Vec<usize>>,
        basis_val: Arc<Vec<f64>>,
        n_out: usize,
    ) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput("edge_mix inputs"));
        }
        let shape0 = self.shape(inputs[0]);
        for &t in inputs {
            if self.shape(t) != shape0 {
                return Err(Error::ShapeMismatch {
                    op: "edge_mix",
                    expected: fmt_shape(shape0),
                    got: fmt_shape(self.shape(t)),
                });
            }
        }
        let n_edges = src.len();
        if dst.len() != n_edges || basis_idx.len() != basis_val.len() {
            return Err(Error::ShapeMismatch {
                op: "edge_mix",
                expected: format!("{n_edges} dst entries and equal basis arrays"),
                got: format!("{} dst, {}/{} basis", dst.len(), basis_idx.len(), basis_val.len()),
            });
        }
        if n_edges == 0 {
            let rg = inputs.iter().any(|&t| self.needs(t));
            return Ok(self.push(
                (n_out, shape0.1),
                vec![0.0; n_out * shape0.1],
                rg,
                Op::EdgeMix {
                    inputs: inputs.to_vec(),
                    src,
                    dst,
                    basis_idx,
                    basis_val,
                    inv_deg: Arc::new(vec![0.0; n_out]),
                },
            ));
        }
        if basis_idx.len() % n_edges != 0 {
            return Err(Error::ShapeMismatch {
                op: "edge_mix",
                expected: format!("basis arrays divisible by {n_edges} edges"),
                got: format!("{}", basis_idx.len()),
            });
        }
        let nb = basis_idx.len() / n_edges;
        for (&s, &d) in src.iter().zip(dst.iter()) {
            if s >= shape0.0 {
                return Err(Error::IndexOutOfRange {
                    op: "edge_mix source",
                    index: s,
                    len: shape0.0,
                });
            }
            if d >= n_out {
                return Err(Error::IndexOutOfRange {
                    op: "edge_mix destination",
                    index: d,
                    len: n_out,
                });
            }
        }
        for &p in basis_idx.iter() {
            if p >= inputs.len() {
                return Err(Error::IndexOutOfRange {
                    op: "edge_mix basis index",
                    index: p,
                    len: inputs.len(),
                });
            }
        }
        let mut deg = vec![0.0f64; n_out];
        for &d in dst.iter() {
            deg[d] += 1.0;
        }
        let inv_deg: Arc<Vec<f64>> = Arc::new(
            deg.iter()
                .map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 })
                .collect(),
        );
        let cols = shape0.1;
        let mut data = vec![0.0; n_out * cols];
        for e in 0..n_edges {
            let (s, d) = (src[e], dst[e]);
            for t in 0..nb {
                let p = basis_idx[e * nb + t];
                let val = basis_val[e * nb + t];
                let row = &self.nodes[inputs[p].0].data[s * cols..(s + 1) * cols];
                let out = &mut data[d * cols..(d + 1) * cols];
                for c in 0..cols {
                    out[c] += val * row[c];
                }
            }
        }
        for d in 0..n_out {
            for c in 0..cols {
                data[d * cols + c] *= inv_deg[d];
            }
        }
        let rg = inputs.iter().any(|&t| self.needs(t));
        Ok(self.push(
            (n_out, cols),
            data,
            rg,
            Op::EdgeMix {
                inputs: inputs.to_vec(),
                src,
                dst,
                basis_idx,
                basis_val,
                inv_deg,
            },
        ))
    }

    /// Reverse-mode differentiation from a scalar loss. Gradients of all
    /// nodes with `requires_grad` become available through `grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.data.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected: "(1, 1) scalar loss".to_string(),
                got: fmt_shape(loss_node.shape),
            });
        }
        for node in &mut self.nodes {
            node.grad = if node.requires_grad {
                Some(vec![0.0; node.data.len()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let gout = self.nodes[id].grad.clone().unwrap();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(a), self.shape(b));
                    let sc = (sa.0, sb.1);
                    if self.needs(a) {
                        // dA = dC * B'
                        let mut da = vec![0.0; sa.0 * sa.1];
                        gemm(false, true, &gout, sc, &self.nodes[b.0].data, sb, &mut da);
                        accumulate(self.nodes[a.0].grad.as_mut().unwrap(), &da);
                    }
                    if self.needs(b) {
                        // dB = A' * dC
                        let mut db = vec![0.0; sb.0 * sb.1];
                        gemm(true, false, &self.nodes[a.0].data, sa, &gout, sc, &mut db);
                        accumulate(self.nodes[b.0].grad.as_mut().unwrap(), &db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        accumulate(self.nodes[a.0].grad.as_mut().unwrap(), &gout);
                    }
                    if self.needs(b) {
                        accumulate(self.nodes[b.0].grad.as_mut().unwrap(), &gout);
                    }
                }
                Op::AddRowBroadcast(a, b) => {
                    if self.needs(a) {
                        accumulate(self.nodes[a.0].grad.as_mut().unwrap(), &gout);
                    }
                    if self.needs(b) {
                        let cols = self.shape(b).1;
                        let gb = self.nodes[b.0].grad.as_mut().unwrap();
                        for (i, &g) in gout.iter().enumerate() {
                            gb[i % cols] += g;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        accumulate(self.nodes[a.0].grad.as_mut().unwrap(), &gout);
                    }
                    if self.needs(b) {
                        let gb = self.nodes[b.0].grad.as_mut().unwrap();
                        for (g, &v) in gb.iter_mut().zip(&gout) {
                            *g -= v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let bd = self.nodes[b.0].data.clone();
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for i in 0..gout.len() {
                            ga[i] += gout[i] * bd[i];
                        }
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].data.clone();
                        let gb = self.nodes[b.0].grad.as_mut().unwrap();
                        for i in 0..gout.len() {
                            gb[i] += gout[i] * ad[i];
                        }
                    }
                }
                Op::Scale(a, factor) => {
                    if self.needs(a) {
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for (g, &v) in ga.iter_mut().zip(&gout) {
                            *g += factor * v;
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.shape(a).1, self.shape(b).1);
                    let rows = self.shape(a).0;
                    if self.needs(a) {
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for r in 0..rows {
                            for c in 0..ca {
                                ga[r * ca + c] += gout[r * (ca + cb) + c];
                            }
                        }
                    }
                    if self.needs(b) {
                        let gb = self.nodes[b.0].grad.as_mut().unwrap();
                        for r in 0..rows {
                            for c in 0..cb {
                                gb[r * cb + c] += gout[r * (ca + cb) + ca + c];
                            }
                        }
                    }
                }
                Op::GatherRows(a, indices) => {
                    if self.needs(a) {
                        let cols = self.shape(a).1;
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for (r, &i) in indices.iter().enumerate() {
                            for c in 0..cols {
                                ga[i * cols + c] += gout[r * cols + c];
                            }
                        }
                    }
                }
                Op::ScatterMean {
                    values,
                    target_rows,
                    inv_count,
                } => {
                    if self.needs(values) {
                        let cols = self.shape(values).1;
                        let gv = self.nodes[values.0].grad.as_mut().unwrap();
                        for (r, &t) in target_rows.iter().enumerate() {
                            let w = inv_count[t];
                            for c in 0..cols {
                                gv[r * cols + c] += w * gout[t * cols + c];
                            }
                        }
                    }
                }
                Op::Elu(a) => {
                    if self.needs(a) {
                        let out = self.nodes[id].data.clone();
                        let ad = self.nodes[a.0].data.clone();
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for i in 0..gout.len() {
                            let slope = if ad[i] > 0.0 { 1.0 } else { out[i] + 1.0 };
                            ga[i] += gout[i] * slope;
                        }
                    }
                }
                Op::Relu(a) => {
                    if self.needs(a) {
                        let ad = self.nodes[a.0].data.clone();
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for i in 0..gout.len() {
                            if ad[i] > 0.0 {
                                ga[i] += gout[i];
                            }
                        }
                    }
                }
                Op::Mse(pred, target) => {
                    let n = self.nodes[pred.0].data.len() as f64;
                    let g = gout[0] * 2.0 / n;
                    let diff: Vec<f64> = self.nodes[pred.0]
                        .data
                        .iter()
                        .zip(&self.nodes[target.0].data)
                        .map(|(&p, &t)| p - t)
                        .collect();
                    if self.needs(pred) {
                        let gp = self.nodes[pred.0].grad.as_mut().unwrap();
                        for (gi, &d) in gp.iter_mut().zip(&diff) {
                            *gi += g * d;
                        }
                    }
                    if self.needs(target) {
                        let gt = self.nodes[target.0].grad.as_mut().unwrap();
                        for (gi, &d) in gt.iter_mut().zip(&diff) {
                            *gi -= g * d;
                        }
                    }
                }
                Op::ScaleRows(a, factors) => {
                    if self.needs(a) {
                        let cols = self.shape(a).1;
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for (i, g) in ga.iter_mut().enumerate() {
                            *g += gout[i] * factors[i / cols];
                        }
                    }
                }
                Op::EdgeMix {
                    inputs,
                    src,
                    dst,
                    basis_idx,
                    basis_val,
                    inv_deg,
                } => {
                    let cols = self.shape(inputs[0]).1;
                    let n_edges = src.len();
                    let nb = if n_edges == 0 { 0 } else { basis_idx.len() / n_edges };
                    for e in 0..n_edges {
                        let (s, d) = (src[e], dst[e]);
                        let w = inv_deg[d];
                        for t in 0..nb {
                            let p = basis_idx[e * nb + t];
                            if !self.needs(inputs[p]) {
                                continue;
                            }
                            let val = basis_val[e * nb + t] * w;
                            let gp = self.nodes[inputs[p].0].grad.as_mut().unwrap();
                            for c in 0..cols {
                                gp[s * cols + c] += val * gout[d * cols + c];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grad: &mut [f64], add: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(add) {
        *g += a;
    }
}

/// `out = op(a) * op(b)` where `op` is optional transposition; shapes are
/// those of the untransposed inputs.
fn gemm(ta: bool, tb: bool, a: &[f64], sa: Shape, b: &[f64], sb: Shape, out: &mut [f64]) {
    let av = ArrayView2::from_shape(sa, a).expect("lhs shape");
    let bv = ArrayView2::from_shape(sb, b).expect("rhs shape");
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    let m = av.nrows();
    let n = bv.ncols();
    let mut ov = ArrayViewMut2::from_shape((m, n), out).expect("output shape");
    general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
}

#[cfg(test)]
mod tests;
