//! Pre-norm transformer building blocks over named parameters.

use super::params::{Bound, Initializer, ParamSet};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

pub fn init_linear(params: &mut ParamSet, init: &mut Initializer, prefix: &str, fan_in: usize, fan_out: usize) {
    params.insert(format!("{prefix}.weight"), init.truncated_normal(&[fan_in, fan_out]));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(params: &mut ParamSet, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::full(&[width], 1.0));
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]));
}

/// `x·W + b` with `W: [in, out]`.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    g.layer_norm(x, Some((gamma, beta)))
}

/// Shape of one transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BlockShape {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

pub fn init_block(params: &mut ParamSet, init: &mut Initializer, prefix: &str, shape: BlockShape) {
    let d = shape.width;
    init_layer_norm(params, &format!("{prefix}.norm1"), d);
    for proj in ["q", "k", "v", "out"] {
        init_linear(params, init, &format!("{prefix}.attn.{proj}"), d, d);
    }
    init_layer_norm(params, &format!("{prefix}.norm2"), d);
    init_linear(params, init, &format!("{prefix}.mlp.fc1"), d, d * shape.mlp_ratio);
    init_linear(params, init, &format!("{prefix}.mlp.fc2"), d * shape.mlp_ratio, d);
}

/// Full multi-head self-attention over every row of `x`.
pub fn self_attention(g: &mut Graph, p: &Bound, prefix: &str, shape: BlockShape, x: Var) -> Result<Var> {
    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k = linear(g, p, &format!("{prefix}.k"), x)?;
    let v = linear(g, p, &format!("{prefix}.v"), x)?;
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(shape.heads);
    for h in 0..shape.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    linear(g, p, &format!("{prefix}.out"), merged)
}

/// `x + attn(norm1(x))`, then `x + mlp(norm2(x))`.
pub fn block(g: &mut Graph, p: &Bound, prefix: &str, shape: BlockShape, x: Var) -> Result<Var> {
    let rows_in = g.value(x).rows();
    let h = layer_norm(g, p, &format!("{prefix}.norm1"), x)?;
    let h = self_attention(g, p, &format!("{prefix}.attn"), shape, h)?;
    let x = g.add(x, h)?;
    let h = layer_norm(g, p, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h)?;
    let out = g.add(x, h)?;
    if g.value(out).rows() != rows_in {
        return Err(Error::shape("block", &[rows_in], g.shape(out)));
    }
    Ok(out)
}

pub fn blocks(g: &mut Graph, p: &Bound, prefix: &str, shape: BlockShape, depth: usize, mut x: Var) -> Result<Var> {
    for i in 0..depth {
        x = block(g, p, &format!("{prefix}.blocks.{i}"), shape, x)?;
    }
    Ok(x)
}
