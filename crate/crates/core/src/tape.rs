//! Tape-based reverse-mode differentiation.
//!
//! Forward values are computed eagerly as operations are recorded into an
//! append-only arena; `backward` replays the arena in reverse and accumulates
//! adjoints via the chain rule. A tape lives for one forward pass and is
//! rebuilt for the next — no graph reuse, no shared mutable state.
//!
//! Adjoints are only materialized along paths that can reach a trainable
//! leaf, so frozen weights cost nothing in the backward sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node on a tape. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Node references always point backward in the arena.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// a[m,k] · b[k,n]
    MatMul { lhs: NodeId, rhs: NodeId },
    /// a[m,k] · b[n,k]^T — the dominant layout in this crate (x · W^T)
    MatMulNt { lhs: NodeId, rhs: NodeId },
    /// m[r,c] · v[c]
    MatVec { mat: NodeId, vec: NodeId },
    Transpose { input: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    Sub { lhs: NodeId, rhs: NodeId },
    /// Elementwise product
    Mul { lhs: NodeId, rhs: NodeId },
    /// Elementwise quotient
    Div { lhs: NodeId, rhs: NodeId },
    /// Constant scaling
    Scale { input: NodeId, factor: f64 },
    /// Scaling by a scalar-shaped node (gradients flow into the scalar)
    ScaleByScalar { input: NodeId, scalar: NodeId },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    /// Full-tensor Euclidean norm, reduced to a scalar
    L2Norm { input: NodeId },
    /// Per-row Euclidean norms of a matrix, [n,d] -> [n]
    RowL2Norms { input: NodeId },
    /// Full-tensor inner product, reduced to a scalar
    Dot { lhs: NodeId, rhs: NodeId },
    Sum { input: NodeId },
    Mean { input: NodeId },
    /// [n,d] plus a [d] bias broadcast over rows
    AddBias { input: NodeId, bias: NodeId },
    /// Row subset of a matrix, in the order given; duplicates allowed
    GatherRows { input: NodeId, rows: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Gradients of one scalar output with respect to trainable leaves.
///
/// Leaves the output does not depend on have no entry (their gradient is
/// identically zero).
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id.0)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.map.contains_key(&id.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Gradient for `id`, or zeros of the given shape when absent.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// Recording arena for one forward pass.
#[derive(Default)]
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    /// Leaf whose gradient will be reported by `backward`.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, trainable: bool) -> NodeId {
        let needs_grad = trainable
            || op_inputs(&op)
                .iter()
                .any(|id| self.nodes[id.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, trainable, needs_grad });
        id
    }

    /// Record one primitive: evaluate it eagerly, check the result is finite,
    /// append the node.
    pub fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        value.ensure_finite(op_name(&op))?;
        Ok(self.push(value, op, false))
    }

    // ── Typed recording front-ends ──────────────────────────────────

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul { lhs, rhs })
    }

    pub fn matmul_nt(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.record(Op::MatMulNt { lhs, rhs })
    }

    pub fn matvec(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        self.record(Op::MatVec { mat, vec })
    }

    pub fn transpose(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose { input })
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.record(Op::Add { lhs, rhs })
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.record(Op::Sub { lhs, rhs })
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.record(Op::Mul { lhs, rhs })
    }

    pub fn div(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.record(Op::Div { lhs, rhs })
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        self.record(Op::Scale { input, factor })
    }

    pub fn scale_by_scalar(&mut self, input: NodeId, scalar: NodeId) -> Result<NodeId> {
        self.record(Op::ScaleByScalar { input, scalar })
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid { input })
    }

    pub fn l2_norm(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(Op::L2Norm { input })
    }

    pub fn row_l2_norms(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(Op::RowL2Norms { input })
    }

    pub fn dot(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.record(Op::Dot { lhs, rhs })
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(Op::Sum { input })
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        self.record(Op::Mean { input })
    }

    pub fn add_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddBias { input, bias })
    }

    pub fn gather_rows(&mut self, input: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.record(Op::GatherRows { input, rows })
    }

    // ── Forward evaluation ──────────────────────────────────────────

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let t = |id: NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::MatMul { lhs, rhs } => {
                let (a, b) = (t(*lhs), t(*rhs));
                require_matrix("matmul", a)?;
                require_matrix("matmul", b)?;
                if a.cols() != b.rows() {
                    return Err(shape_err("matmul", a, b));
                }
                let bt = transpose_data(b.data(), b.rows(), b.cols());
                let out = matmul_nt_data(a.data(), &bt, a.rows(), a.cols(), b.cols());
                Ok(Tensor::new(vec![a.rows(), b.cols()], out))
            }
            Op::MatMulNt { lhs, rhs } => {
                let (a, b) = (t(*lhs), t(*rhs));
                require_matrix("matmul_nt", a)?;
                require_matrix("matmul_nt", b)?;
                if a.cols() != b.cols() {
                    return Err(shape_err("matmul_nt", a, b));
                }
                let out = matmul_nt_data(a.data(), b.data(), a.rows(), a.cols(), b.rows());
                Ok(Tensor::new(vec![a.rows(), b.rows()], out))
            }
            Op::MatVec { mat, vec } => {
                let (m, v) = (t(*mat), t(*vec));
                require_matrix("matvec", m)?;
                if !v.is_vector() || m.cols() != v.len() {
                    return Err(shape_err("matvec", m, v));
                }
                let out = (0..m.rows()).map(|i| dot_data(m.row(i), v.data())).collect();
                Ok(Tensor::new(vec![m.rows()], out))
            }
            Op::Transpose { input } => {
                let a = t(*input);
                require_matrix("transpose", a)?;
                let out = transpose_data(a.data(), a.rows(), a.cols());
                Ok(Tensor::new(vec![a.cols(), a.rows()], out))
            }
            Op::Add { lhs, rhs } => elementwise("add", t(*lhs), t(*rhs), |x, y| x + y),
            Op::Sub { lhs, rhs } => elementwise("sub", t(*lhs), t(*rhs), |x, y| x - y),
            Op::Mul { lhs, rhs } => elementwise("mul", t(*lhs), t(*rhs), |x, y| x * y),
            Op::Div { lhs, rhs } => elementwise("div", t(*lhs), t(*rhs), |x, y| x / y),
            Op::Scale { input, factor } => {
                let a = t(*input);
                let out = a.data().iter().map(|v| v * factor).collect();
                Ok(Tensor::new(a.shape().to_vec(), out))
            }
            Op::ScaleByScalar { input, scalar } => {
                let (a, s) = (t(*input), t(*scalar));
                if !s.is_scalar() {
                    return Err(shape_err("scale_by_scalar", a, s));
                }
                let c = s.item();
                let out = a.data().iter().map(|v| v * c).collect();
                Ok(Tensor::new(a.shape().to_vec(), out))
            }
            Op::Relu { input } => {
                let a = t(*input);
                let out = a.data().iter().map(|v| v.max(0.0)).collect();
                Ok(Tensor::new(a.shape().to_vec(), out))
            }
            Op::Sigmoid { input } => {
                let a = t(*input);
                let out = a.data().iter().map(|v| sigmoid_scalar(*v)).collect();
                Ok(Tensor::new(a.shape().to_vec(), out))
            }
            Op::L2Norm { input } => Ok(Tensor::scalar(t(*input).l2_norm())),
            Op::RowL2Norms { input } => {
                let a = t(*input);
                require_matrix("row_l2_norms", a)?;
                let out = (0..a.rows())
                    .map(|i| a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                Ok(Tensor::new(vec![a.rows()], out))
            }
            Op::Dot { lhs, rhs } => {
                let (a, b) = (t(*lhs), t(*rhs));
                if a.shape() != b.shape() {
                    return Err(shape_err("dot", a, b));
                }
                Ok(Tensor::scalar(dot_data(a.data(), b.data())))
            }
            Op::Sum { input } => Ok(Tensor::scalar(t(*input).data().iter().sum())),
            Op::Mean { input } => {
                let a = t(*input);
                if a.is_empty() {
                    return Err(Error::ShapeMismatch { op: "mean", detail: "empty tensor".into() });
                }
                Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
            }
            Op::AddBias { input, bias } => {
                let (a, b) = (t(*input), t(*bias));
                require_matrix("add_bias", a)?;
                if !b.is_vector() || b.len() != a.cols() {
                    return Err(shape_err("add_bias", a, b));
                }
                let cols = a.cols();
                let out = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.data()[i % cols])
                    .collect();
                Ok(Tensor::new(a.shape().to_vec(), out))
            }
            Op::GatherRows { input, rows } => {
                let a = t(*input);
                require_matrix("gather_rows", a)?;
                if let Some(&bad) = rows.iter().find(|&&r| r >= a.rows()) {
                    return Err(Error::ShapeMismatch {
                        op: "gather_rows",
                        detail: format!("row {bad} out of range for {} rows", a.rows()),
                    });
                }
                Ok(a.gather_rows(rows))
            }
        }
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Returns gradients for every
    /// trainable leaf the output depends on.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::NonScalarOutput { shape: out.value.shape().to_vec() });
        }
        let mut grads = Gradients::default();
        if !out.needs_grad {
            return Ok(grads);
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = Vec::new();
        adjoint.resize_with(output.0 + 1, || None);
        adjoint[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.trainable {
                    grads
                        .map
                        .insert(i, Tensor::new(node.value.shape().to_vec(), g));
                }
                continue;
            }
            self.propagate(i, &g, &mut adjoint);
        }
        Ok(grads)
    }

    /// Add `delta` into the adjoint slot of `target` if that node can reach a
    /// trainable leaf.
    fn accumulate(&self, adjoint: &mut [Option<Vec<f64>>], target: NodeId, delta: Vec<f64>) {
        let node = &self.nodes[target.0];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(delta.len(), node.value.len());
        match &mut adjoint[target.0] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(&delta) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        let t = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { lhs, rhs } => {
                let (a, b) = (t(*lhs), t(*rhs));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if needs(*lhs) {
                    // dA = G · B^T; b's rows already have the common length n
                    let da = matmul_nt_data(g, b.data(), m, n, k);
                    self.accumulate(adjoint, *lhs, da);
                }
                if needs(*rhs) {
                    // dB = A^T · G
                    let db = matmul_tn_data(a.data(), g, m, k, n);
                    self.accumulate(adjoint, *rhs, db);
                }
            }
            Op::MatMulNt { lhs, rhs } => {
                let (a, b) = (t(*lhs), t(*rhs));
                let (m, k, n) = (a.rows(), a.cols(), b.rows());
                if needs(*lhs) {
                    // dA = G · B  ([m,n]·[n,k])
                    let bt = transpose_data(b.data(), n, k);
                    let da = matmul_nt_data(g, &bt, m, n, k);
                    self.accumulate(adjoint, *lhs, da);
                }
                if needs(*rhs) {
                    // dB = G^T · A  ([n,m]·[m,k])
                    let db = matmul_tn_data(g, a.data(), m, n, k);
                    self.accumulate(adjoint, *rhs, db);
                }
            }
            Op::MatVec { mat, vec } => {
                let (mt, v) = (t(*mat), t(*vec));
                let (r, c) = (mt.rows(), mt.cols());
                if needs(*mat) {
                    // dM = g ⊗ v
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        let gi = g[i];
                        for j in 0..c {
                            dm[i * c + j] = gi * v.data()[j];
                        }
                    }
                    self.accumulate(adjoint, *mat, dm);
                }
                if needs(*vec) {
                    // dv = M^T g
                    let mut dv = vec![0.0; c];
                    for i in 0..r {
                        let gi = g[i];
                        for (j, d) in dv.iter_mut().enumerate() {
                            *d += gi * mt.data()[i * c + j];
                        }
                    }
                    self.accumulate(adjoint, *vec, dv);
                }
            }
            Op::Transpose { input } => {
                if needs(*input) {
                    let a = t(*input);
                    let gt = transpose_data(g, a.cols(), a.rows());
                    self.accumulate(adjoint, *input, gt);
                }
            }
            Op::Add { lhs, rhs } => {
                if needs(*lhs) {
                    self.accumulate(adjoint, *lhs, g.to_vec());
                }
                if needs(*rhs) {
                    self.accumulate(adjoint, *rhs, g.to_vec());
                }
            }
            Op::Sub { lhs, rhs } => {
                if needs(*lhs) {
                    self.accumulate(adjoint, *lhs, g.to_vec());
                }
                if needs(*rhs) {
                    let neg = g.iter().map(|v| -v).collect();
                    self.accumulate(adjoint, *rhs, neg);
                }
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (t(*lhs), t(*rhs));
                if needs(*lhs) {
                    let d = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(adjoint, *lhs, d);
                }
                if needs(*rhs) {
                    let d = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(adjoint, *rhs, d);
                }
            }
            Op::Div { lhs, rhs } => {
                let (a, b) = (t(*lhs), t(*rhs));
                if needs(*lhs) {
                    let d = g.iter().zip(b.data()).map(|(g, y)| g / y).collect();
                    self.accumulate(adjoint, *lhs, d);
                }
                if needs(*rhs) {
                    let d = g
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(adjoint, *rhs, d);
                }
            }
            Op::Scale { input, factor } => {
                if needs(*input) {
                    let f = *factor;
                    let d = g.iter().map(|v| v * f).collect();
                    self.accumulate(adjoint, *input, d);
                }
            }
            Op::ScaleByScalar { input, scalar } => {
                let (a, s) = (t(*input), t(*scalar));
                if needs(*input) {
                    let c = s.item();
                    let d = g.iter().map(|v| v * c).collect();
                    self.accumulate(adjoint, *input, d);
                }
                if needs(*scalar) {
                    let d = dot_data(g, a.data());
                    self.accumulate(adjoint, *scalar, vec![d]);
                }
            }
            Op::Relu { input } => {
                if needs(*input) {
                    // subgradient at exactly zero is 0
                    let a = t(*input);
                    let d = g
                        .iter()
                        .zip(a.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(adjoint, *input, d);
                }
            }
            Op::Sigmoid { input } => {
                if needs(*input) {
                    let out = &self.nodes[i].value;
                    let d = g
                        .iter()
                        .zip(out.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(adjoint, *input, d);
                }
            }
            Op::L2Norm { input } => {
                if needs(*input) {
                    let a = t(*input);
                    let norm = self.nodes[i].value.item();
                    if norm > 0.0 {
                        let c = g[0] / norm;
                        let d = a.data().iter().map(|x| c * x).collect();
                        self.accumulate(adjoint, *input, d);
                    }
                }
            }
            Op::RowL2Norms { input } => {
                if needs(*input) {
                    let a = t(*input);
                    let norms = self.nodes[i].value.data();
                    let c = a.cols();
                    let mut d = vec![0.0; a.len()];
                    for r in 0..a.rows() {
                        if norms[r] > 0.0 {
                            let f = g[r] / norms[r];
                            for j in 0..c {
                                d[r * c + j] = f * a.data()[r * c + j];
                            }
                        }
                    }
                    self.accumulate(adjoint, *input, d);
                }
            }
            Op::Dot { lhs, rhs } => {
                let (a, b) = (t(*lhs), t(*rhs));
                let s = g[0];
                if needs(*lhs) {
                    let d = b.data().iter().map(|y| s * y).collect();
                    self.accumulate(adjoint, *lhs, d);
                }
                if needs(*rhs) {
                    let d = a.data().iter().map(|x| s * x).collect();
                    self.accumulate(adjoint, *rhs, d);
                }
            }
            Op::Sum { input } => {
                if needs(*input) {
                    let n = t(*input).len();
                    self.accumulate(adjoint, *input, vec![g[0]; n]);
                }
            }
            Op::Mean { input } => {
                if needs(*input) {
                    let n = t(*input).len();
                    self.accumulate(adjoint, *input, vec![g[0] / n as f64; n]);
                }
            }
            Op::AddBias { input, bias } => {
                if needs(*input) {
                    self.accumulate(adjoint, *input, g.to_vec());
                }
                if needs(*bias) {
                    let cols = t(*bias).len();
                    let mut d = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        d[i % cols] += v;
                    }
                    self.accumulate(adjoint, *bias, d);
                }
            }
            Op::GatherRows { input, rows } => {
                if needs(*input) {
                    let a = t(*input);
                    let c = a.cols();
                    let mut d = vec![0.0; a.len()];
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for j in 0..c {
                            d[src_r * c + j] += g[out_r * c + j];
                        }
                    }
                    self.accumulate(adjoint, *input, d);
                }
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { lhs, rhs }
        | Op::MatMulNt { lhs, rhs }
        | Op::Add { lhs, rhs }
        | Op::Sub { lhs, rhs }
        | Op::Mul { lhs, rhs }
        | Op::Div { lhs, rhs }
        | Op::Dot { lhs, rhs } => vec![*lhs, *rhs],
        Op::MatVec { mat, vec } => vec![*mat, *vec],
        Op::ScaleByScalar { input, scalar } => vec![*input, *scalar],
        Op::AddBias { input, bias } => vec![*input, *bias],
        Op::Transpose { input }
        | Op::Scale { input, .. }
        | Op::Relu { input }
        | Op::Sigmoid { input }
        | Op::L2Norm { input }
        | Op::RowL2Norms { input }
        | Op::Sum { input }
        | Op::Mean { input }
        | Op::GatherRows { input, .. } => vec![*input],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::MatMulNt { .. } => "matmul_nt",
        Op::MatVec { .. } => "matvec",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Div { .. } => "div",
        Op::Scale { .. } => "scale",
        Op::ScaleByScalar { .. } => "scale_by_scalar",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::L2Norm { .. } => "l2_norm",
        Op::RowL2Norms { .. } => "row_l2_norms",
        Op::Dot { .. } => "dot",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::AddBias { .. } => "add_bias",
        Op::GatherRows { .. } => "gather_rows",
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, detail: format!("expected matrix, got shape {:?}", t.shape()) })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, detail: format!("{:?} incompatible with {:?}", a.shape(), b.shape()) }
}

fn elementwise(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    let out = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Ok(Tensor::new(a.shape().to_vec(), out))
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Dense kernels ───────────────────────────────────────────────────
// Fixed summation order, so repeated evaluation is bit-identical.

pub(crate) fn dot_data(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// a[m,k] · b[n,k]^T -> [m,n]; both operands read row-major.
pub(crate) fn matmul_nt_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot_data(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// a[m,k]^T · b[m,n] -> [k,n]; accumulates rank-one row contributions.
pub(crate) fn matmul_tn_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let or = &mut out[p * n..(p + 1) * n];
            for (o, bv) in or.iter_mut().zip(br) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_data(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_gradient, relative_error};
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn matmul_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
    }

    #[test]
    fn elementwise_add_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0; 5]));
        let b = tape.constant(Tensor::vector(vec![2.0; 5]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[5]);
        assert_eq!(tape.value(c).data(), &[3.0; 5]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b);
        assert!(matches!(err, Err(Error::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn dot_of_x_with_itself_grad() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![3.0]));
        let y = tape.dot(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn non_finite_result_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(1.0));
        assert!(matches!(tape.scale(x, f64::INFINITY), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn norm_of_matrix_vector_product_matches_finite_differences() {
        let mut rng = crate::rng::stream_rng(11, crate::rng::Stream::AdapterInit);
        let w0 = rand_tensor(vec![4, 4], &mut rng);
        let v = rand_tensor(vec![4], &mut rng);

        let eval = |w: &Tensor| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let wn = tape.variable(w.clone());
            let vn = tape.constant(v.clone());
            let prod = tape.matvec(wn, vn)?;
            let norm = tape.l2_norm(prod)?;
            Ok(tape.value(norm).item())
        };

        let mut tape = Tape::new();
        let wn = tape.variable(w0.clone());
        let vn = tape.constant(v.clone());
        let prod = tape.matvec(wn, vn).unwrap();
        let norm = tape.l2_norm(prod).unwrap();
        let grads = tape.backward(norm).unwrap();

        let fd = finite_diff_gradient(eval, &w0, 1e-5).unwrap();
        let err = relative_error(grads.get(wn).unwrap(), &fd);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let run = || {
            let mut rng = crate::rng::stream_rng(3, crate::rng::Stream::SourceData);
            let mut tape = Tape::new();
            let a = tape.variable(rand_tensor(vec![3, 5], &mut rng));
            let b = tape.constant(rand_tensor(vec![4, 5], &mut rng));
            let c = tape.matmul_nt(a, b).unwrap();
            let s = tape.sigmoid(c).unwrap();
            let out = tape.mean(s).unwrap();
            let grads = tape.backward(out).unwrap();
            (tape.value(out).clone(), grads.get(a).unwrap().clone())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.bit_eq(&v2));
        assert!(g1.bit_eq(&g2));
    }

    #[test]
    fn adjoints_are_linear_in_the_loss() {
        let mut rng = crate::rng::stream_rng(5, crate::rng::Stream::TargetData);
        let x0 = rand_tensor(vec![6], &mut rng);
        let a0 = rand_tensor(vec![6], &mut rng);

        let mut tape = Tape::new();
        let x = tape.variable(x0.clone());
        let a = tape.constant(a0.clone());
        let l1 = tape.dot(x, a).unwrap();
        let l2 = tape.l2_norm(x).unwrap();
        let both = tape.add(l1, l2).unwrap();

        let g_sum = tape.backward(both).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();

        for i in 0..6 {
            let lhs = g_sum.get(x).unwrap().data()[i];
            let rhs = g1.get(x).unwrap().data()[i] + g2.get(x).unwrap().data()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_receive_no_entry() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.dot(x, w).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.contains(x));
        assert!(!grads.contains(w));
        assert_eq!(grads.len(), 1);
    }
}
