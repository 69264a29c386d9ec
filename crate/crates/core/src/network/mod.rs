//! ViT encoder, reconstruction decoder, feature generator and alignment projections.
//!
//! All modules read their weights from a [`ParamSet`] by name, so the student,
//! teacher and auxiliary alignment modules can live in separate sets while
//! sharing one graph.

mod layers;
mod params;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use layers::{block, blocks, init_block, init_layer_norm, init_linear, layer_norm, linear, self_attention, BlockShape};
pub use params::{Bound, Initializer, ParamSet, INIT_STD};

use crate::error::{Error, Result};
use crate::masking::set_diff;
use crate::numcore::{Graph, Tensor, Var};
use crate::tokenize::{sinusoidal_pe, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

/// Generator blocks run at the teacher's width; only depth and head count are free.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl EncoderConfig {
    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn violations(&self, name: &str) -> Vec<String> {
        width_violations(name, self.width, self.heads, self.mlp_ratio)
    }
}

impl DecoderConfig {
    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn violations(&self, name: &str) -> Vec<String> {
        width_violations(name, self.width, self.heads, self.mlp_ratio)
    }
}

impl GeneratorConfig {
    pub fn block_shape(&self, teacher_width: usize) -> BlockShape {
        BlockShape {
            width: teacher_width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn violations(&self, teacher_width: usize) -> Vec<String> {
        let mut out = width_violations("generator", teacher_width, self.heads, self.mlp_ratio);
        if self.depth == 0 {
            out.push("generator depth must be at least 1".into());
        }
        out
    }
}

fn width_violations(name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Vec<String> {
    let mut out = Vec::new();
    if width == 0 || !width.is_multiple_of(2) {
        out.push(format!("{name} width {width} must be positive and even (sinusoidal position encoding)"));
    }
    if heads == 0 || !width.is_multiple_of(heads) {
        out.push(format!("{name} width {width} is not divisible by {heads} heads"));
    }
    if mlp_ratio == 0 {
        out.push(format!("{name} mlp_ratio must be positive"));
    }
    out
}

/// Per-layer encoder features keyed by 1-based block index.
#[derive(Clone, Debug, Default)]
pub struct FeatureTap {
    taps: BTreeMap<usize, Var>,
}

impl FeatureTap {
    pub fn new(taps: BTreeMap<usize, Var>) -> Self {
        FeatureTap { taps }
    }

    pub fn get(&self, layer: usize) -> Result<Var> {
        self.taps
            .get(&layer)
            .copied()
            .ok_or_else(|| Error::InvalidTensor(format!("layer {layer} was not tapped")))
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.taps.keys().copied()
    }

    /// Detach the tapped values from their graph.
    pub fn values(&self, g: &Graph) -> BTreeMap<usize, Tensor> {
        self.taps.iter().map(|(l, v)| (*l, g.value(*v).clone())).collect()
    }
}

pub struct EncoderOutput {
    /// Output of the last block (the embedded input plus PE when depth is 0).
    pub hidden: Var,
    /// `hidden` after the encoder's final layer norm; what the decoder consumes.
    pub normed: Var,
    pub taps: FeatureTap,
}

pub fn init_encoder(params: &mut ParamSet, init: &mut Initializer, prefix: &str, cfg: &EncoderConfig, cube_len: usize) {
    init_linear(params, init, &format!("{prefix}.embed"), cube_len, cfg.width);
    for i in 0..cfg.depth {
        init_block(params, init, &format!("{prefix}.blocks.{i}"), cfg.block_shape());
    }
    init_layer_norm(params, &format!("{prefix}.norm"), cfg.width);
}

/// Cube embedding of the visible rows of a `[N, cube_len]` cube matrix.
pub fn embed_visible(g: &mut Graph, p: &Bound, prefix: &str, cubes: &Tensor, visible: &[usize]) -> Result<Var> {
    let rows = cubes.gather_rows(visible)?;
    let x = g.constant(rows);
    linear(g, p, &format!("{prefix}.embed"), x)
}

/// Fixed position encodings for the given absolute token indices.
pub fn pe_rows(g: &mut Graph, num_tokens: usize, width: usize, indices: &[usize]) -> Result<Var> {
    let table = sinusoidal_pe(num_tokens, width)?;
    Ok(g.constant(table.gather_rows(indices)?))
}

/// Transformer encoder over an already-restricted visible token sequence.
///
/// `tokens` and `pe` must carry one row per visible token, in the same order.
/// No class token is used; every block keeps the row count unchanged.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    cfg: &EncoderConfig,
    tokens: Var,
    pe: Var,
    tap_layers: &[usize],
    tap_after_final_norm: bool,
) -> Result<EncoderOutput> {
    if let Some(&bad) = tap_layers.iter().find(|&&l| l == 0 || l > cfg.depth) {
        return Err(Error::Config(vec![format!(
            "tap layer {bad} outside 1..={}",
            cfg.depth
        )]));
    }
    let visible = g.value(tokens).rows();
    let mut x = g.add(tokens, pe)?;
    let mut taps = BTreeMap::new();
    for i in 0..cfg.depth {
        x = block(g, p, &format!("{prefix}.blocks.{i}"), cfg.block_shape(), x)?;
        if g.value(x).rows() != visible {
            return Err(Error::shape("encoder", &[visible], g.shape(x)));
        }
        if tap_layers.contains(&(i + 1)) {
            taps.insert(i + 1, x);
        }
    }
    let normed = layer_norm(g, p, &format!("{prefix}.norm"), x)?;
    if tap_after_final_norm && cfg.depth > 0 && tap_layers.contains(&cfg.depth) {
        taps.insert(cfg.depth, normed);
    }
    Ok(EncoderOutput {
        hidden: x,
        normed,
        taps: FeatureTap { taps },
    })
}

/// Embed `visible` rows of `cubes`, add their PE and run the encoder.
#[allow(clippy::too_many_arguments)]
pub fn encode_visible(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    cfg: &EncoderConfig,
    cubes: &Tensor,
    visible: &[usize],
    tap_layers: &[usize],
    tap_after_final_norm: bool,
) -> Result<EncoderOutput> {
    let tokens = embed_visible(g, p, prefix, cubes, visible)?;
    let pe = pe_rows(g, cubes.rows(), cfg.width, visible)?;
    encoder_forward(g, p, prefix, cfg, tokens, pe, tap_layers, tap_after_final_norm)
}

pub fn init_decoder(
    params: &mut ParamSet,
    init: &mut Initializer,
    prefix: &str,
    cfg: &DecoderConfig,
    encoder_width: usize,
    cube_len: usize,
) {
    init_linear(params, init, &format!("{prefix}.input"), encoder_width, cfg.width);
    params.insert(format!("{prefix}.mask_token"), Tensor::zeros(&[1, cfg.width]));
    for i in 0..cfg.depth {
        init_block(params, init, &format!("{prefix}.blocks.{i}"), cfg.block_shape());
    }
    init_layer_norm(params, &format!("{prefix}.norm"), cfg.width);
    init_linear(params, init, &format!("{prefix}.head"), cfg.width, cube_len);
}

/// Pixel-cube predictions for all `N` grid tokens from the student's visible latents.
pub fn decoder_forward(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    cfg: &DecoderConfig,
    latent: Var,
    visible: &[usize],
    grid: &TokenGrid,
) -> Result<Var> {
    let n = grid.num_tokens();
    if visible.iter().any(|&i| i >= n) {
        return Err(Error::Mask(format!("visible index outside a grid of {n} tokens")));
    }
    if g.value(latent).rows() != visible.len() {
        return Err(Error::shape("decoder", g.shape(latent), &[visible.len()]));
    }
    let x = linear(g, p, &format!("{prefix}.input"), latent)?;
    let masked = set_diff(&(0..n).collect::<Vec<_>>(), visible)?;
    let seq = if masked.is_empty() {
        x
    } else {
        let token = p.var(&format!("{prefix}.mask_token"))?;
        let fill = g.gather_rows(token, &vec![0; masked.len()])?;
        g.concat(&[x, fill], 0)?
    };
    // row of each grid position inside [visible ++ masked]
    let mut order = vec![0usize; n];
    for (row, &pos) in visible.iter().chain(masked.iter()).enumerate() {
        order[pos] = row;
    }
    let seq = g.gather_rows(seq, &order)?;
    let pe = pe_rows(g, n, cfg.width, &(0..n).collect::<Vec<_>>())?;
    let x = g.add(seq, pe)?;
    let x = blocks(g, p, prefix, cfg.block_shape(), cfg.depth, x)?;
    let x = layer_norm(g, p, &format!("{prefix}.norm"), x)?;
    linear(g, p, &format!("{prefix}.head"), x)
}

pub fn init_generator(params: &mut ParamSet, init: &mut Initializer, prefix: &str, cfg: &GeneratorConfig, teacher_width: usize) {
    params.insert(format!("{prefix}.mask_token"), Tensor::zeros(&[1, teacher_width]));
    for i in 0..cfg.depth {
        init_block(params, init, &format!("{prefix}.blocks.{i}"), cfg.block_shape(teacher_width));
    }
}

pub struct GeneratorOutput {
    /// Generated teacher-space features for the difference tokens; `None` when there are none.
    pub generated: Option<Var>,
    /// Length of the sequence the attention blocks ran over.
    pub seq_len: usize,
}

/// MHA blocks over `[z̃ ; MASK × |diff|] + PE`, returning the rows at the difference slots.
#[allow(clippy::too_many_arguments)]
pub fn generator_forward(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    cfg: &GeneratorConfig,
    z_tilde: Var,
    student: &[usize],
    diff: &[usize],
    grid: &TokenGrid,
) -> Result<GeneratorOutput> {
    let width = g.value(z_tilde).cols();
    if g.value(z_tilde).rows() != student.len() {
        return Err(Error::shape("generator", g.shape(z_tilde), &[student.len()]));
    }
    if diff.is_empty() {
        return Ok(GeneratorOutput {
            generated: None,
            seq_len: student.len(),
        });
    }
    let token = p.var(&format!("{prefix}.mask_token"))?;
    let fill = g.gather_rows(token, &vec![0; diff.len()])?;
    let seq = g.concat(&[z_tilde, fill], 0)?;
    let positions: Vec<usize> = student.iter().chain(diff).copied().collect();
    let pe = pe_rows(g, grid.num_tokens(), width, &positions)?;
    let x = g.add(seq, pe)?;
    let seq_len = g.value(x).rows();
    let x = blocks(g, p, prefix, cfg.block_shape(width), cfg.depth, x)?;
    let diff_rows: Vec<usize> = (student.len()..seq_len).collect();
    let generated = g.gather_rows(x, &diff_rows)?;
    Ok(GeneratorOutput {
        generated: Some(generated),
        seq_len,
    })
}

/// Student-to-teacher feature projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    Linear,
    /// affine → GELU → affine, hidden width equal to the teacher width
    Mlp2,
}

pub fn init_projection(
    params: &mut ParamSet,
    init: &mut Initializer,
    prefix: &str,
    mode: ProjectionMode,
    student_width: usize,
    teacher_width: usize,
) {
    match mode {
        ProjectionMode::Linear => init_linear(params, init, prefix, student_width, teacher_width),
        ProjectionMode::Mlp2 => {
            init_linear(params, init, &format!("{prefix}.fc1"), student_width, teacher_width);
            init_linear(params, init, &format!("{prefix}.fc2"), teacher_width, teacher_width);
        }
    }
}

/// Project un-normalized student features into the teacher's width.
pub fn project(g: &mut Graph, p: &Bound, prefix: &str, mode: ProjectionMode, features: Var) -> Result<Var> {
    match mode {
        ProjectionMode::Linear => linear(g, p, prefix, features),
        ProjectionMode::Mlp2 => {
            let h = linear(g, p, &format!("{prefix}.fc1"), features)?;
            let h = g.gelu(h)?;
            linear(g, p, &format!("{prefix}.fc2"), h)
        }
    }
}
