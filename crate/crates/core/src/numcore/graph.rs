//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` simply walks it in reverse.

use std::fmt;
use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One differentiable operation together with its inputs.
///
/// Shape rules (all tensors at most 2-D unless noted):
/// - `MatMul`: `[m,k] · [k,n] → [m,n]`
/// - `Add`: identical shapes, or `[m,n] + [n]` which adds the vector to every row
/// - `Sub`, `SquaredDifference`: identical shapes, elementwise
/// - `Scale`, `Gelu`, `Abs`: any shape, elementwise
/// - `Concat`: 2-D inputs along axis 0 (equal column counts) or axis 1 (equal row counts)
/// - `GatherRows`: `[m,n]` and indices `< m` (repeats allowed) `→ [len,n]`
/// - `SliceCols`: `[m,n] → [m,len]` taking columns `start..start+len`
/// - `Transpose`: `[m,n] → [n,m]`
/// - `Softmax`, `LayerNorm`: normalize along the last axis; the optional affine
///   parameters of `LayerNorm` are `[n]` vectors
/// - `Mean`, `Sum`: any shape `→ []`
#[derive(Clone, Debug)]
pub enum Op {
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { input: Var, indices: Arc<[usize]> },
    SliceCols { input: Var, start: usize, len: usize },
    Transpose(Var),
    Softmax(Var),
    LayerNorm { input: Var, affine: Option<(Var, Var)> },
    Gelu(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    SquaredDifference(Var, Var),
}

/// Discriminant of [`Op`], used in error messages and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Scale,
    Concat,
    GatherRows,
    SliceCols,
    Transpose,
    Softmax,
    LayerNorm,
    Gelu,
    Abs,
    Mean,
    Sum,
    SquaredDifference,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat { .. } => OpKind::Concat,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Abs(_) => OpKind::Abs,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::SquaredDifference(..) => OpKind::SquaredDifference,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::SquaredDifference(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Abs(a)
            | Op::Mean(a)
            | Op::Sum(a) => vec![*a],
            Op::GatherRows { input, .. } | Op::SliceCols { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { input, affine } => match affine {
                Some((g, b)) => vec![*input, *g, *b],
                None => vec![*input],
            },
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

struct Node {
    op: Option<Op>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    trainable: Vec<bool>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if any flowed into it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a trainable leaf; zeros when the leaf did not influence the root.
    pub fn wrt(&self, var: Var) -> Option<Tensor> {
        if !self.trainable[var.0] {
            return None;
        }
        Some(
            self.get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0])),
        )
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: None,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0]
            .op
            .as_ref()
            .map_or(OpKind::Leaf, Op::kind)
    }

    /// Evaluate `op` and record it.
    pub fn apply(&mut self, op: Op) -> Result<Var> {
        let value = self.forward(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: Some(op),
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(a, factor))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        })
    }

    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::GatherRows {
            input,
            indices: indices.into(),
        })
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::SliceCols { input, start, len })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, input: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        self.apply(Op::LayerNorm { input, affine })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Abs(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum(a))
    }

    pub fn squared_difference(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::SquaredDifference(a, b))
    }

    fn forward(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| -> &Tensor { &self.nodes[v.0].value };
        let out = match op {
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                let (sa, sb) = (a.shape(), b.shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(Error::shape("matmul", sa, sb));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
            }
            Op::Add(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape() == b.shape() {
                    zip_map(a, b, |x, y| x + y)
                } else if b.shape().len() == 1 && a.shape().len() == 2 && a.cols() == b.numel() {
                    let bias = b.data();
                    let data = a
                        .data()
                        .chunks(bias.len())
                        .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
                        .collect();
                    Tensor::from_parts(a.shape().to_vec(), data)
                } else {
                    return Err(Error::shape("add", a.shape(), b.shape()));
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape() != b.shape() {
                    return Err(Error::shape("sub", a.shape(), b.shape()));
                }
                zip_map(a, b, |x, y| x - y)
            }
            Op::SquaredDifference(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape() != b.shape() {
                    return Err(Error::shape("squared_difference", a.shape(), b.shape()));
                }
                zip_map(a, b, |x, y| (x - y) * (x - y))
            }
            Op::Scale(a, c) => val(a).map(|x| x * c),
            Op::Gelu(a) => val(a).map(kernels::gelu),
            Op::Abs(a) => val(a).map(f64::abs),
            Op::Concat { inputs, axis } => self.concat_forward(inputs, *axis)?,
            Op::GatherRows { input, indices } => {
                let x = val(input);
                if x.shape().len() != 2 {
                    return Err(Error::shape("gather_rows", x.shape(), &[indices.len()]));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
                    return Err(Error::shape("gather_rows", x.shape(), &[bad]));
                }
                if indices.is_empty() {
                    return Err(Error::shape("gather_rows", x.shape(), &[0]));
                }
                x.gather_rows(indices)?
            }
            Op::SliceCols { input, start, len } => {
                let x = val(input);
                if x.shape().len() != 2 || *len == 0 || start + len > x.cols() {
                    return Err(Error::shape("slice_cols", x.shape(), &[*start, *len]));
                }
                let data = (0..x.rows())
                    .flat_map(|i| x.row(i)[*start..start + len].iter().copied())
                    .collect();
                Tensor::from_parts(vec![x.rows(), *len], data)
            }
            Op::Transpose(a) => {
                let x = val(a);
                if x.shape().len() != 2 {
                    return Err(Error::shape("transpose", x.shape(), &[]));
                }
                let (r, c) = (x.shape()[0], x.shape()[1]);
                Tensor::from_parts(vec![c, r], kernels::transpose(x.data(), r, c))
            }
            Op::Softmax(a) => {
                let x = val(a);
                if x.is_scalar() {
                    return Err(Error::shape("softmax", x.shape(), &[]));
                }
                let mut data = Vec::with_capacity(x.numel());
                for row in x.data().chunks(x.cols()) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let start = data.len();
                    data.extend(row.iter().map(|v| (v - max).exp()));
                    let total: f64 = data[start..].iter().sum();
                    data[start..].iter_mut().for_each(|v| *v /= total);
                }
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::LayerNorm { input, affine } => {
                let x = val(input);
                if x.is_scalar() {
                    return Err(Error::shape("layer_norm", x.shape(), &[]));
                }
                let cols = x.cols();
                let params = match affine {
                    Some((g, b)) => {
                        let (g, b) = (val(g), val(b));
                        if g.shape() != [cols] || b.shape() != [cols] {
                            return Err(Error::shape("layer_norm", x.shape(), g.shape()));
                        }
                        Some((g.data(), b.data()))
                    }
                    None => None,
                };
                let mut data = Vec::with_capacity(x.numel());
                for row in x.data().chunks(cols) {
                    let (mean, rstd) = kernels::row_stats(row, LAYER_NORM_EPS);
                    for (j, v) in row.iter().enumerate() {
                        let xhat = (v - mean) * rstd;
                        data.push(match params {
                            Some((g, b)) => xhat * g[j] + b[j],
                            None => xhat,
                        });
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::Mean(a) => {
                let x = val(a);
                Tensor::scalar(kernels::compensated_sum(x.data()) / x.numel() as f64)
            }
            Op::Sum(a) => Tensor::scalar(kernels::compensated_sum(val(a).data())),
        };
        Ok(out)
    }

    fn concat_forward(&self, inputs: &[Var], axis: usize) -> Result<Tensor> {
        let first = match inputs.first() {
            Some(v) => self.value(*v),
            None => return Err(Error::InvalidTensor("concat of zero tensors".into())),
        };
        if first.shape().len() != 2 || axis > 1 {
            return Err(Error::shape("concat", first.shape(), &[axis]));
        }
        for v in &inputs[1..] {
            let s = self.value(*v).shape();
            if s.len() != 2 || s[1 - axis] != first.shape()[1 - axis] {
                return Err(Error::shape("concat", first.shape(), s));
            }
        }
        if axis == 0 {
            let rows = inputs.iter().map(|v| self.value(*v).rows()).sum();
            let mut data = Vec::with_capacity(rows * first.cols());
            for v in inputs {
                data.extend_from_slice(self.value(*v).data());
            }
            Ok(Tensor::from_parts(vec![rows, first.cols()], data))
        } else {
            let rows = first.rows();
            let cols = inputs.iter().map(|v| self.value(*v).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for v in inputs {
                    data.extend_from_slice(self.value(*v).row(i));
                }
            }
            Ok(Tensor::from_parts(vec![rows, cols], data))
        }
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(op, &node.value, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        let trainable: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| n.op.is_none() && n.requires_grad)
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut out: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        out.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads: out,
            shapes,
            trainable,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        var: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let n = self.nodes[var.0].value.numel();
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_node(&self, op: &Op, out: &Tensor, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: &Var| -> &Tensor { &self.nodes[v.0].value };
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(a) {
                    self.accumulate(grads, *a, kernels::matmul_bt(dy, bv.data(), m, n, k));
                }
                if needs(b) {
                    self.accumulate(grads, *b, kernels::matmul_at(av.data(), dy, m, k, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                if needs(b) {
                    if val(a).shape() == val(b).shape() {
                        self.accumulate(grads, *b, dy.to_vec());
                    } else {
                        let cols = val(b).numel();
                        self.accumulate_with(grads, *b, |g| {
                            for row in dy.chunks(cols) {
                                g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.iter().map(|d| -d).collect());
            }
            Op::SquaredDifference(a, b) => {
                let diff: Vec<f64> = val(a)
                    .data()
                    .iter()
                    .zip(val(b).data())
                    .zip(dy)
                    .map(|((x, y), d)| 2.0 * (x - y) * d)
                    .collect();
                if needs(b) {
                    self.accumulate(grads, *b, diff.iter().map(|d| -d).collect());
                }
                self.accumulate(grads, *a, diff);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, dy.iter().map(|d| d * c).collect()),
            Op::Gelu(a) => {
                let g = val(a)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(x, d)| kernels::gelu_grad(*x) * d)
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Abs(a) => {
                let g = val(a)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(x, d)| if *x > 0.0 { *d } else if *x < 0.0 { -d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for v in inputs {
                        let n = val(v).numel();
                        self.accumulate(grads, *v, dy[offset..offset + n].to_vec());
                        offset += n;
                    }
                } else {
                    let total = out.cols();
                    let mut offset = 0;
                    for v in inputs {
                        let c = val(v).cols();
                        let g = dy
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + c].iter().copied())
                            .collect();
                        self.accumulate(grads, *v, g);
                        offset += c;
                    }
                }
            }
            Op::GatherRows { input, indices } => {
                let cols = val(input).cols();
                self.accumulate_with(grads, *input, |g| {
                    for (r, &src) in indices.iter().enumerate() {
                        let dst = &mut g[src * cols..(src + 1) * cols];
                        dst.iter_mut()
                            .zip(&dy[r * cols..(r + 1) * cols])
                            .for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::SliceCols { input, start, len } => {
                let cols = val(input).cols();
                self.accumulate_with(grads, *input, |g| {
                    for (grow, drow) in g.chunks_mut(cols).zip(dy.chunks(*len)) {
                        grow[*start..start + len]
                            .iter_mut()
                            .zip(drow)
                            .for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *a, kernels::transpose(dy, r, c));
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut g = Vec::with_capacity(dy.len());
                for (yrow, drow) in out.data().chunks(cols).zip(dy.chunks(cols)) {
                    let dot: f64 = yrow.iter().zip(drow).map(|(y, d)| y * d).sum();
                    g.extend(yrow.iter().zip(drow).map(|(y, d)| y * (d - dot)));
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm { input, affine } => {
                self.layer_norm_backward(*input, *affine, dy, grads);
            }
            Op::Mean(a) => {
                let n = val(a).numel();
                self.accumulate(grads, *a, vec![dy[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = val(a).numel();
                self.accumulate(grads, *a, vec![dy[0]; n]);
            }
        }
    }

    fn layer_norm_backward(
        &self,
        input: Var,
        affine: Option<(Var, Var)>,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = self.value(input);
        let cols = x.cols();
        let n = cols as f64;
        let gamma = affine.map(|(g, _)| self.value(g).data().to_vec());
        let mut dx = Vec::with_capacity(x.numel());
        let mut dgamma = vec![0.0; cols];
        let mut dbeta = vec![0.0; cols];
        for (row, drow) in x.data().chunks(cols).zip(dy.chunks(cols)) {
            let (mean, rstd) = kernels::row_stats(row, LAYER_NORM_EPS);
            let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
            let dxhat: Vec<f64> = match &gamma {
                Some(g) => drow.iter().zip(g).map(|(d, g)| d * g).collect(),
                None => drow.to_vec(),
            };
            for j in 0..cols {
                dgamma[j] += drow[j] * xhat[j];
                dbeta[j] += drow[j];
            }
            let sum_d: f64 = dxhat.iter().sum();
            let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum();
            dx.extend(
                dxhat
                    .iter()
                    .zip(&xhat)
                    .map(|(d, xh)| rstd / n * (n * d - sum_d - xh * sum_dx)),
            );
        }
        self.accumulate(grads, input, dx);
        if let Some((g, b)) = affine {
            self.accumulate(grads, g, dgamma);
            self.accumulate(grads, b, dbeta);
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}
