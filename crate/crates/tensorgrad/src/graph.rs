//! Computation graphs with cached forward evaluation and reverse-mode gradients.
//!
//! Nodes are appended in construction order and may only reference earlier
//! nodes, so insertion order is a topological order. [`Graph::forward_eval`]
//! evaluates every node once and caches the values; [`Graph::backward`]
//! walks the cache in reverse, visiting each node at most once.

use std::collections::BTreeMap;

use crate::error::GraphError;
use crate::tensor::{matmul, matmul_nt, matmul_tn, transpose, Real, Tensor};

pub type Bindings<T> = BTreeMap<String, Tensor<T>>;
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Parameter { name: String, shape: Vec<usize> },
    Input { name: String, shape: Vec<usize> },
    Constant(Tensor<T>),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softmax { x: NodeId, keep: Option<Vec<bool>> },
    LogSumExp(NodeId),
    Entropy(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    PairwiseL2(NodeId, NodeId),
    Bilinear { left: NodeId, weight: NodeId, right: NodeId },
    Gather { x: NodeId, index: Vec<usize> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    SliceCols { x: NodeId, start: usize, end: usize },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    MaskedSum { x: NodeId, keep: Vec<bool> },
    MaskedMean { x: NodeId, keep: Vec<bool> },
    WeightedSum { x: NodeId, weights: Vec<f64> },
    LinComb(Vec<(NodeId, f64)>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Parameter { .. } => "parameter",
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Entropy(_) => "entropy",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::PairwiseL2(..) => "pairwise_l2",
            Op::Bilinear { .. } => "bilinear",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaskedSum { .. } => "masked_sum",
            Op::MaskedMean { .. } => "masked_mean",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::LinComb(_) => "lin_comb",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Parameter { .. } | Op::Input { .. } | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::PairwiseL2(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::LogSumExp(x)
            | Op::Entropy(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::Gather { x, .. }
            | Op::SelectRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::MaskedSum { x, .. }
            | Op::MaskedMean { x, .. }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::Bilinear {
                left,
                weight,
                right,
            } => vec![*left, *weight, *right],
            Op::ConcatCols(xs) => xs.clone(),
            Op::LinComb(terms) => terms.iter().map(|(n, _)| *n).collect(),
        }
    }
}

/// A directed acyclic graph of tensor operations.
///
/// Leaves are trainable parameters, bound inputs, or embedded constants.
/// Only parameters receive gradients.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
    root: Option<NodeId>,
    values: Option<Vec<Tensor<T>>>,
}

/// Shape-check failure inside an op, before the node index is attached.
struct Mismatch(String);

type OpResult<T> = Result<Tensor<T>, Mismatch>;

fn mismatch<T>(detail: impl Into<String>) -> OpResult<T> {
    Err(Mismatch(detail.into()))
}

fn tensor<T: Real>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("op kernels produce consistent shapes")
}

fn shape_without_last(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

fn as_matrix<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize), Mismatch> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Mismatch(format!("{what} must be 2-D, got {s:?}"))),
    }
}

enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast, Mismatch> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.ndim() == 1 && a.ndim() >= 1 && b.len() == a.last_dim() {
        Ok(Broadcast::Row)
    } else if b.ndim() == 0 {
        Ok(Broadcast::Scalar)
    } else {
        Err(Mismatch(format!(
            "cannot broadcast {:?} onto {:?}",
            b.shape(),
            a.shape()
        )))
    }
}

fn broadcast_binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> OpResult<T> {
    let kind = broadcast_kind(a, b)?;
    let bd = b.data();
    let c = a.last_dim().max(1);
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = match kind {
                Broadcast::Same => bd[i],
                Broadcast::Row => bd[i % c],
                Broadcast::Scalar => bd[0],
            };
            f(x, y)
        })
        .collect();
    Ok(tensor(a.shape().to_vec(), data))
}

/// Sums a gradient shaped like `a` down to the shape of broadcast operand `b`.
fn reduce_to<T: Real>(g: Vec<T>, a_shape: &[usize], b: &Tensor<T>) -> Tensor<T> {
    if a_shape == b.shape() {
        return tensor(b.shape().to_vec(), g);
    }
    if b.ndim() == 0 {
        return Tensor::scalar(g.iter().copied().sum());
    }
    let c = b.len();
    let mut out = vec![T::zero(); c];
    for (i, v) in g.into_iter().enumerate() {
        out[i % c] = out[i % c] + v;
    }
    tensor(b.shape().to_vec(), out)
}

fn softmax_rows<T: Real>(x: &Tensor<T>, keep: Option<&[bool]>) -> Vec<T> {
    let c = x.last_dim();
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.outer_len() {
        let row = x.row(r);
        let kept = |j: usize| keep.is_none_or(|k| k[r * c + j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if kept(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut total = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if kept(j) {
                let e = (v - max).exp();
                out[r * c + j] = e;
                total = total + e;
            }
        }
        for o in &mut out[r * c..(r + 1) * c] {
            *o = *o / total;
        }
    }
    out
}

fn logsumexp_row<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let deriv = half * (one + t) + half * x * (one - t * t) * k * (one + T::of(3.0) * a * x * x);
    (value, deriv)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            requires_grad: Vec::new(),
            root: None,
            values: None,
        }
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        let requires = match &op {
            Op::Parameter { .. } => true,
            other => other.inputs().iter().any(|n| self.requires_grad[n.0]),
        };
        self.ops.push(op);
        self.requires_grad.push(requires);
        self.values = None;
        NodeId(self.ops.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// A trainable leaf, bound by name at evaluation time.
    pub fn parameter(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        self.push(Op::Parameter {
            name: name.into(),
            shape: shape.to_vec(),
        })
    }

    /// A non-trainable leaf, bound by name at evaluation time.
    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        self.push(Op::Input {
            name: name.into(),
            shape: shape.to_vec(),
        })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
    }

    /// Elementwise `a + b`; `b` may be a row vector or a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax { x, keep: None })
    }

    /// Softmax over the last axis restricted to entries where `keep` is true.
    /// Dropped entries get probability exactly zero; a row with nothing kept
    /// is all zeros.
    pub fn masked_softmax(&mut self, x: NodeId, keep: Vec<bool>) -> NodeId {
        self.push(Op::Softmax {
            x,
            keep: Some(keep),
        })
    }

    pub fn logsumexp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSumExp(x))
    }

    /// Shannon entropy (nats) of `softmax(x)` per row.
    pub fn entropy(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Entropy(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, gain, bias })
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Embedding { table, ids })
    }

    /// `out[i][j] = ‖a_i − b_j‖₂` for row sets `a[l,d]`, `b[m,d]`.
    pub fn pairwise_l2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::PairwiseL2(a, b))
    }

    /// `out[i][j] = left_i · W · right_j`.
    pub fn bilinear(&mut self, left: NodeId, weight: NodeId, right: NodeId) -> NodeId {
        self.push(Op::Bilinear {
            left,
            weight,
            right,
        })
    }

    /// Picks `x[r][index[r]]` for every row.
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>) -> NodeId {
        self.push(Op::Gather { x, index })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::SelectRows { x, rows })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, end })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(parts))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn masked_sum(&mut self, x: NodeId, keep: Vec<bool>) -> NodeId {
        self.push(Op::MaskedSum { x, keep })
    }

    /// Mean over kept entries; zero (with zero gradient) when nothing is kept.
    pub fn masked_mean(&mut self, x: NodeId, keep: Vec<bool>) -> NodeId {
        self.push(Op::MaskedMean { x, keep })
    }

    /// `Σ weights[i] · x[i]`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> NodeId {
        self.push(Op::WeightedSum { x, weights })
    }

    /// `Σ coef · node` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        self.push(Op::LinComb(terms))
    }

    /// Chooses the node `backward` differentiates; defaults to the last node.
    pub fn set_root(&mut self, root: NodeId) {
        self.root = Some(root);
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root.or_else(|| self.ops.len().checked_sub(1).map(NodeId))
    }

    /// Names and shapes of trainable leaves, in insertion order.
    pub fn parameters(&self) -> Vec<(&str, &[usize])> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Parameter { name, shape } => Some((name.as_str(), shape.as_slice())),
                _ => None,
            })
            .collect()
    }

    /// Cached value of a node from the last `forward_eval`.
    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values.as_ref().map(|v| &v[id.0])
    }

    /// Evaluates every node, caches the values, and returns the root value.
    pub fn forward_eval(&mut self, bindings: &Bindings<T>) -> Result<Tensor<T>, GraphError> {
        self.values = None;
        let root = self.root().ok_or(GraphError::Empty)?;
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let out = match op {
                Op::Parameter { name, shape } | Op::Input { name, shape } => {
                    let bound = bindings.get(name).ok_or_else(|| GraphError::Unbound {
                        name: name.clone(),
                    })?;
                    if bound.shape() != shape.as_slice() {
                        return Err(GraphError::BindingShape {
                            name: name.clone(),
                            declared: shape.clone(),
                            got: bound.shape().to_vec(),
                        });
                    }
                    bound.clone()
                }
                Op::Constant(t) => t.clone(),
                other => eval_op(other, &values).map_err(|Mismatch(detail)| {
                    GraphError::ShapeMismatch {
                        node: idx,
                        op: other.name(),
                        detail,
                    }
                })?,
            };
            if !out.is_finite() {
                return Err(GraphError::NonFinite {
                    node: idx,
                    op: op.name(),
                });
            }
            values.push(out);
        }
        let result = values[root.0].clone();
        self.values = Some(values);
        Ok(result)
    }

    /// Gradient of the scalar root with respect to every parameter leaf.
    ///
    /// Parameters the root does not depend on get zero tensors.
    pub fn backward(&self) -> Result<Gradients<T>, GraphError> {
        let values = self.values.as_ref().ok_or(GraphError::NotEvaluated)?;
        let root = self.root().ok_or(GraphError::Empty)?;
        let root_value = &values[root.0];
        if root_value.len() != 1 {
            return Err(GraphError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));
        let mut out = Gradients::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.requires_grad[idx] {
                continue;
            }
            let op = &self.ops[idx];
            if let Op::Parameter { name, .. } = op {
                match out.get_mut(name) {
                    Some(acc) => Tensor::add_assign(acc, &g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
                continue;
            }
            for (input, contribution) in backward_op(op, &values[idx], &g, values) {
                if !self.requires_grad[input.0] {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        for op in &self.ops {
            if let Op::Parameter { name, shape } = op {
                out.entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(shape));
            }
        }
        Ok(out)
    }
}

fn eval_op<T: Real>(op: &Op<T>, values: &[Tensor<T>]) -> OpResult<T> {
    let v = |n: &NodeId| &values[n.0];
    match op {
        Op::Parameter { .. } | Op::Input { .. } | Op::Constant(_) => unreachable!("leaves"),
        Op::MatMul(a, b) => {
            let (n, k) = as_matrix(v(a), "lhs")?;
            let (k2, m) = as_matrix(v(b), "rhs")?;
            if k != k2 {
                return mismatch(format!("[{n},{k}] x [{k2},{m}]"));
            }
            Ok(tensor(vec![n, m], matmul(v(a).data(), v(b).data(), n, k, m)))
        }
        Op::Transpose(x) => {
            let (n, m) = as_matrix(v(x), "input")?;
            Ok(tensor(vec![m, n], transpose(v(x).data(), n, m)))
        }
        Op::Add(a, b) => broadcast_binary(v(a), v(b), |x, y| x + y),
        Op::Sub(a, b) => broadcast_binary(v(a), v(b), |x, y| x - y),
        Op::Mul(a, b) => broadcast_binary(v(a), v(b), |x, y| x * y),
        Op::Scale(x, f) => {
            let f = T::of(*f);
            Ok(v(x).map(|a| a * f))
        }
        Op::Gelu(x) => Ok(v(x).map(|a| gelu_parts(a).0)),
        Op::Softmax { x, keep } => {
            let x = v(x);
            if x.ndim() == 0 {
                return mismatch("softmax needs at least one axis");
            }
            if let Some(k) = keep {
                if k.len() != x.len() {
                    return mismatch(format!("mask length {} vs {}", k.len(), x.len()));
                }
            }
            Ok(tensor(x.shape().to_vec(), softmax_rows(x, keep.as_deref())))
        }
        Op::LogSumExp(x) | Op::Entropy(x) => {
            let x = v(x);
            if x.ndim() == 0 || x.last_dim() == 0 {
                return mismatch("reduction over an empty last axis");
            }
            let data = (0..x.outer_len())
                .map(|r| {
                    let row = x.row(r);
                    let lse = logsumexp_row(row);
                    if matches!(op, Op::LogSumExp(_)) {
                        lse
                    } else {
                        let mean_logit: T = row.iter().map(|&z| (z - lse).exp() * z).sum();
                        (lse - mean_logit).max(T::zero())
                    }
                })
                .collect();
            Ok(tensor(shape_without_last(x.shape()), data))
        }
        Op::LayerNorm { x, gain, bias } => {
            let (x, gain, bias) = (v(x), v(gain), v(bias));
            let d = x.last_dim();
            if gain.shape() != [d] || bias.shape() != [d] {
                return mismatch(format!(
                    "gain {:?} / bias {:?} vs width {d}",
                    gain.shape(),
                    bias.shape()
                ));
            }
            let mut out = vec![T::zero(); x.len()];
            for r in 0..x.outer_len() {
                let (xhat, _) = normalize_row(x.row(r));
                for j in 0..d {
                    out[r * d + j] = xhat[j] * gain.data()[j] + bias.data()[j];
                }
            }
            Ok(tensor(x.shape().to_vec(), out))
        }
        Op::Embedding { table, ids } => {
            let (rows, d) = as_matrix(v(table), "table")?;
            if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
                return mismatch(format!("id {bad} outside table of {rows} rows"));
            }
            let data = ids.iter().flat_map(|&i| v(table).row(i).to_vec()).collect();
            Ok(tensor(vec![ids.len(), d], data))
        }
        Op::PairwiseL2(a, b) => {
            let (l, d) = as_matrix(v(a), "lhs")?;
            let (m, d2) = as_matrix(v(b), "rhs")?;
            if d != d2 {
                return mismatch(format!("widths {d} and {d2}"));
            }
            let mut out = Vec::with_capacity(l * m);
            for i in 0..l {
                for j in 0..m {
                    let sq: T = v(a)
                        .row(i)
                        .iter()
                        .zip(v(b).row(j))
                        .map(|(&x, &y)| (x - y) * (x - y))
                        .sum();
                    out.push(sq.sqrt());
                }
            }
            Ok(tensor(vec![l, m], out))
        }
        Op::Bilinear {
            left,
            weight,
            right,
        } => {
            let (l, d) = as_matrix(v(left), "left")?;
            let (wd, we) = as_matrix(v(weight), "weight")?;
            let (m, e) = as_matrix(v(right), "right")?;
            if d != wd || e != we {
                return mismatch(format!("[{l},{d}] x [{wd},{we}] x [{m},{e}]ᵀ"));
            }
            let lw = matmul(v(left).data(), v(weight).data(), l, d, e);
            Ok(tensor(vec![l, m], matmul_nt(&lw, v(right).data(), l, e, m)))
        }
        Op::Gather { x, index } => {
            let (n, c) = as_matrix(v(x), "input")?;
            if index.len() != n || index.iter().any(|&i| i >= c) {
                return mismatch(format!("index of {} entries for [{n},{c}]", index.len()));
            }
            let data = index.iter().enumerate().map(|(r, &i)| v(x).at(r, i)).collect();
            Ok(tensor(vec![n], data))
        }
        Op::SelectRows { x, rows } => {
            let (n, c) = as_matrix(v(x), "input")?;
            if let Some(bad) = rows.iter().find(|&&r| r >= n) {
                return mismatch(format!("row {bad} of {n}"));
            }
            let data = rows.iter().flat_map(|&r| v(x).row(r).to_vec()).collect();
            Ok(tensor(vec![rows.len(), c], data))
        }
        Op::SliceCols { x, start, end } => {
            let (n, c) = as_matrix(v(x), "input")?;
            if start > end || *end > c {
                return mismatch(format!("columns {start}..{end} of {c}"));
            }
            let data = (0..n)
                .flat_map(|r| v(x).row(r)[*start..*end].to_vec())
                .collect();
            Ok(tensor(vec![n, end - start], data))
        }
        Op::ConcatCols(parts) => {
            let mut rows = None;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (n, c) = as_matrix(v(p), "part")?;
                if *rows.get_or_insert(n) != n {
                    return mismatch("parts have different row counts");
                }
                widths.push(c);
            }
            let n = rows.unwrap_or(0);
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(n * total);
            for r in 0..n {
                for p in parts {
                    data.extend_from_slice(v(p).row(r));
                }
            }
            Ok(tensor(vec![n, total], data))
        }
        Op::Sum(x) => Ok(Tensor::scalar(v(x).sum())),
        Op::Mean(x) => {
            let x = v(x);
            if x.is_empty() {
                return Ok(Tensor::scalar(T::zero()));
            }
            Ok(Tensor::scalar(x.sum() / T::of(x.len() as f64)))
        }
        Op::MaskedSum { x, keep } | Op::MaskedMean { x, keep } => {
            let x = v(x);
            if keep.len() != x.len() {
                return mismatch(format!("mask length {} vs {}", keep.len(), x.len()));
            }
            let count = keep.iter().filter(|&&k| k).count();
            let total: T = x
                .data()
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&a, _)| a)
                .sum();
            let value = match op {
                Op::MaskedMean { .. } if count == 0 => T::zero(),
                Op::MaskedMean { .. } => total / T::of(count as f64),
                _ => total,
            };
            Ok(Tensor::scalar(value))
        }
        Op::WeightedSum { x, weights } => {
            let x = v(x);
            if weights.len() != x.len() {
                return mismatch(format!("{} weights for {} values", weights.len(), x.len()));
            }
            let total = x
                .data()
                .iter()
                .zip(weights)
                .map(|(&a, &w)| a * T::of(w))
                .sum();
            Ok(Tensor::scalar(total))
        }
        Op::LinComb(terms) => {
            let Some((first, _)) = terms.first() else {
                return Ok(Tensor::scalar(T::zero()));
            };
            let shape = v(first).shape().to_vec();
            let mut out = Tensor::zeros(&shape);
            for (n, c) in terms {
                if v(n).shape() != shape.as_slice() {
                    return mismatch(format!("term shapes {:?} and {shape:?}", v(n).shape()));
                }
                let c = T::of(*c);
                for (o, &a) in out.data_mut().iter_mut().zip(v(n).data()) {
                    *o = *o + c * a;
                }
            }
            Ok(out)
        }
    }
}

/// Returns `(x̂, 1/σ)` for one layer-norm row.
fn normalize_row<T: Real>(row: &[T]) -> (Vec<T>, T) {
    let d = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / d;
    let inv = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
    (row.iter().map(|&x| (x - mean) * inv).collect(), inv)
}

/// Vector-Jacobian products for one node: `(input, dL/dinput)` pairs.
fn backward_op<T: Real>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    values: &[Tensor<T>],
) -> Vec<(NodeId, Tensor<T>)> {
    let v = |n: &NodeId| &values[n.0];
    match op {
        Op::Parameter { .. } | Op::Input { .. } | Op::Constant(_) => Vec::new(),
        Op::MatMul(a, b) => {
            let (n, k) = (v(a).shape()[0], v(a).shape()[1]);
            let m = v(b).shape()[1];
            let da = matmul_nt(g.data(), v(b).data(), n, m, k);
            let db = matmul_tn(v(a).data(), g.data(), n, k, m);
            vec![(*a, tensor(vec![n, k], da)), (*b, tensor(vec![k, m], db))]
        }
        Op::Transpose(x) => {
            let (m, n) = (g.shape()[0], g.shape()[1]);
            vec![(*x, tensor(vec![n, m], transpose(g.data(), m, n)))]
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            let gb: Vec<T> = g.data().iter().map(|&x| x * sign).collect();
            vec![
                (*a, g.clone()),
                (*b, reduce_to(gb, v(a).shape(), v(b))),
            ]
        }
        Op::Mul(a, b) => {
            let ga = broadcast_binary(g, v(b), |x, y| x * y)
                .ok()
                .expect("shapes validated in forward");
            let gb: Vec<T> = g
                .data()
                .iter()
                .zip(v(a).data())
                .map(|(&x, &y)| x * y)
                .collect();
            vec![(*a, ga), (*b, reduce_to(gb, v(a).shape(), v(b)))]
        }
        Op::Scale(x, f) => {
            let f = T::of(*f);
            vec![(*x, g.map(|a| a * f))]
        }
        Op::Gelu(x) => {
            let data = v(x)
                .data()
                .iter()
                .zip(g.data())
                .map(|(&a, &gv)| gv * gelu_parts(a).1)
                .collect();
            vec![(*x, tensor(g.shape().to_vec(), data))]
        }
        Op::Softmax { x, .. } => {
            let c = out.last_dim();
            let mut dx = vec![T::zero(); out.len()];
            for r in 0..out.outer_len() {
                let p = out.row(r);
                let gr = g.row(r);
                let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    dx[r * c + j] = p[j] * (gr[j] - dot);
                }
            }
            vec![(*x, tensor(out.shape().to_vec(), dx))]
        }
        Op::LogSumExp(xi) => {
            let x = v(xi);
            let c = x.last_dim();
            let mut dx = vec![T::zero(); x.len()];
            for r in 0..x.outer_len() {
                let lse = out.data()[r];
                let gr = g.data()[r];
                for (j, &z) in x.row(r).iter().enumerate() {
                    dx[r * c + j] = gr * (z - lse).exp();
                }
            }
            vec![(*xi, tensor(x.shape().to_vec(), dx))]
        }
        Op::Entropy(xi) => {
            let x = v(xi);
            let c = x.last_dim();
            let mut dx = vec![T::zero(); x.len()];
            for r in 0..x.outer_len() {
                let row = x.row(r);
                let lse = logsumexp_row(row);
                let p: Vec<T> = row.iter().map(|&z| (z - lse).exp()).collect();
                let mean_logit: T = p.iter().zip(row).map(|(&a, &z)| a * z).sum();
                let gr = g.data()[r];
                for j in 0..c {
                    dx[r * c + j] = -gr * p[j] * (row[j] - mean_logit);
                }
            }
            vec![(*xi, tensor(x.shape().to_vec(), dx))]
        }
        Op::LayerNorm { x, gain, bias } => {
            let xv = v(x);
            let gain_v = v(gain).data();
            let d = xv.last_dim();
            let dn = T::of(d as f64);
            let mut dx = vec![T::zero(); xv.len()];
            let mut dgain = vec![T::zero(); d];
            let mut dbias = vec![T::zero(); d];
            for r in 0..xv.outer_len() {
                let (xhat, inv) = normalize_row(xv.row(r));
                let gr = g.row(r);
                let dxhat: Vec<T> = (0..d).map(|j| gr[j] * gain_v[j]).collect();
                let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                let mean_dx: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                for j in 0..d {
                    dx[r * d + j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    dgain[j] = dgain[j] + gr[j] * xhat[j];
                    dbias[j] = dbias[j] + gr[j];
                }
            }
            vec![
                (*x, tensor(xv.shape().to_vec(), dx)),
                (*gain, tensor(vec![d], dgain)),
                (*bias, tensor(vec![d], dbias)),
            ]
        }
        Op::Embedding { table, ids } => {
            let t = v(table);
            let d = t.last_dim();
            let mut dt = Tensor::zeros(t.shape());
            let data = dt.data_mut();
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    data[i * d + j] = data[i * d + j] + g.at(r, j);
                }
            }
            vec![(*table, dt)]
        }
        Op::PairwiseL2(a, b) => {
            let (av, bv) = (v(a), v(b));
            let (l, d) = (av.shape()[0], av.shape()[1]);
            let m = bv.shape()[0];
            let mut da = vec![T::zero(); l * d];
            let mut db = vec![T::zero(); m * d];
            for i in 0..l {
                for j in 0..m {
                    let dist = out.at(i, j);
                    if dist == T::zero() {
                        continue;
                    }
                    let coef = g.at(i, j) / dist;
                    for k in 0..d {
                        let diff = coef * (av.at(i, k) - bv.at(j, k));
                        da[i * d + k] = da[i * d + k] + diff;
                        db[j * d + k] = db[j * d + k] - diff;
                    }
                }
            }
            vec![
                (*a, tensor(vec![l, d], da)),
                (*b, tensor(vec![m, d], db)),
            ]
        }
        Op::Bilinear {
            left,
            weight,
            right,
        } => {
            let (lv, wv, rv) = (v(left), v(weight), v(right));
            let (l, d) = (lv.shape()[0], lv.shape()[1]);
            let (m, e) = (rv.shape()[0], rv.shape()[1]);
            // G·R is shared by dLeft and dW.
            let gr = matmul(g.data(), rv.data(), l, m, e);
            let dleft = matmul_nt(&gr, wv.data(), l, e, d);
            let dw = matmul_tn(lv.data(), &gr, l, d, e);
            let lw = matmul(lv.data(), wv.data(), l, d, e);
            let dright = matmul_tn(g.data(), &lw, l, m, e);
            vec![
                (*left, tensor(vec![l, d], dleft)),
                (*weight, tensor(vec![d, e], dw)),
                (*right, tensor(vec![m, e], dright)),
            ]
        }
        Op::Gather { x, index } => {
            let xv = v(x);
            let c = xv.last_dim();
            let mut dx = Tensor::zeros(xv.shape());
            for (r, &i) in index.iter().enumerate() {
                dx.data_mut()[r * c + i] = g.data()[r];
            }
            vec![(*x, dx)]
        }
        Op::SelectRows { x, rows } => {
            let xv = v(x);
            let c = xv.last_dim();
            let mut dx = Tensor::zeros(xv.shape());
            let data = dx.data_mut();
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..c {
                    data[r * c + j] = data[r * c + j] + g.at(k, j);
                }
            }
            vec![(*x, dx)]
        }
        Op::SliceCols { x, start, end } => {
            let xv = v(x);
            let c = xv.last_dim();
            let w = end - start;
            let mut dx = Tensor::zeros(xv.shape());
            for r in 0..xv.outer_len() {
                dx.data_mut()[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            vec![(*x, dx)]
        }
        Op::ConcatCols(parts) => {
            let n = g.shape()[0];
            let mut offset = 0;
            let mut result = Vec::with_capacity(parts.len());
            for p in parts {
                let w = v(p).last_dim();
                let data = (0..n)
                    .flat_map(|r| g.row(r)[offset..offset + w].to_vec())
                    .collect();
                result.push((*p, tensor(vec![n, w], data)));
                offset += w;
            }
            result
        }
        Op::Sum(x) => {
            let gv = g.data()[0];
            vec![(*x, Tensor::full(v(x).shape(), gv))]
        }
        Op::Mean(x) => {
            let n = v(x).len().max(1);
            let gv = g.data()[0] / T::of(n as f64);
            vec![(*x, Tensor::full(v(x).shape(), gv))]
        }
        Op::MaskedSum { x, keep } | Op::MaskedMean { x, keep } => {
            let count = keep.iter().filter(|&&k| k).count();
            let gv = match op {
                Op::MaskedMean { .. } if count == 0 => T::zero(),
                Op::MaskedMean { .. } => g.data()[0] / T::of(count as f64),
                _ => g.data()[0],
            };
            let data = keep
                .iter()
                .map(|&k| if k { gv } else { T::zero() })
                .collect();
            vec![(*x, tensor(v(x).shape().to_vec(), data))]
        }
        Op::WeightedSum { x, weights } => {
            let gv = g.data()[0];
            let data = weights.iter().map(|&w| gv * T::of(w)).collect();
            vec![(*x, tensor(v(x).shape().to_vec(), data))]
        }
        Op::LinComb(terms) => terms
            .iter()
            .map(|(n, c)| (*n, g.scale(T::of(*c))))
            .collect(),
    }
}
