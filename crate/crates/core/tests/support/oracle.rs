//! Token-by-token scalar reference for the three loss terms.
//!
//! Everything here is written with plain loops over `f64` so it shares no
//! kernels with the graph implementation.

#![allow(dead_code)]

use std::collections::BTreeMap;

use amd_core::distill::{AlignmentPlan, LossKind, ProjectionSpec};
use amd_core::masking::MaskPair;
use amd_core::network::{GeneratorConfig, ParamSet, ProjectionMode};
use amd_core::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn param(params: &ParamSet, name: &str) -> Tensor {
    params.get(name).unwrap_or_else(|e| panic!("{e}")).clone()
}

fn affine(params: &ParamSet, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = param(params, &format!("{prefix}.weight"));
    let b = param(params, &format!("{prefix}.bias"));
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), fan_in);
    (0..fan_out)
        .map(|j| {
            let mut acc = b.data()[j];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.data()[i * fan_out + j];
            }
            acc
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn norm(params: &ParamSet, prefix: &str, x: &[f64]) -> Vec<f64> {
    let gamma = param(params, &format!("{prefix}.gamma"));
    let beta = param(params, &format!("{prefix}.beta"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + 1e-6).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / denom * gamma.data()[j] + beta.data()[j])
        .collect()
}

pub fn project_token(params: &ParamSet, spec: &ProjectionSpec, x: &[f64]) -> Vec<f64> {
    match spec.mode {
        ProjectionMode::Linear => affine(params, &spec.prefix, x),
        ProjectionMode::Mlp2 => {
            let h: Vec<f64> = affine(params, &format!("{}.fc1", spec.prefix), x)
                .into_iter()
                .map(gelu)
                .collect();
            affine(params, &format!("{}.fc2", spec.prefix), &h)
        }
    }
}

pub fn position_encoding(pos: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for i in 0..width / 2 {
        let freq = (-(2.0 * i as f64 / width as f64) * 10000f64.ln()).exp();
        out[2 * i] = (pos as f64 * freq).sin();
        out[2 * i + 1] = (pos as f64 * freq).cos();
    }
    out
}

/// One pre-norm block over a whole sequence.
pub fn block(params: &ParamSet, prefix: &str, heads: usize, x: &Rows) -> Rows {
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let h: Rows = x.iter().map(|r| norm(params, &format!("{prefix}.norm1"), r)).collect();
    let q: Rows = h.iter().map(|r| affine(params, &format!("{prefix}.attn.q"), r)).collect();
    let k: Rows = h.iter().map(|r| affine(params, &format!("{prefix}.attn.k"), r)).collect();
    let v: Rows = h.iter().map(|r| affine(params, &format!("{prefix}.attn.v"), r)).collect();
    let mut x1 = x.clone();
    for i in 0..n {
        let mut merged = vec![0.0; d];
        for head in 0..heads {
            let cols = head * dh..(head + 1) * dh;
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = weights.iter().sum();
            for c in cols {
                merged[c] = (0..n).map(|j| weights[j] / z * v[j][c]).sum();
            }
        }
        let out = affine(params, &format!("{prefix}.attn.out"), &merged);
        for c in 0..d {
            x1[i][c] += out[c];
        }
    }
    x1.iter()
        .map(|r| {
            let h = norm(params, &format!("{prefix}.norm2"), r);
            let h: Vec<f64> = affine(params, &format!("{prefix}.mlp.fc1"), &h).into_iter().map(gelu).collect();
            let h = affine(params, &format!("{prefix}.mlp.fc2"), &h);
            r.iter().zip(h).map(|(a, b)| a + b).collect()
        })
        .collect()
}

fn token_error(a: &[f64], b: &[f64], kind: LossKind) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| match kind {
            LossKind::Mse => (x - y) * (x - y),
            LossKind::L1 => (x - y).abs(),
        })
        .sum()
}

fn teacher_row(mask: &MaskPair, teacher: &Rows, token: usize) -> Vec<f64> {
    let row = mask.teacher.iter().position(|&t| t == token).expect("token visible to teacher");
    teacher[row].clone()
}

/// Mean squared error over the entries of every student-masked token.
pub fn recon(pred: &Tensor, targets: &Tensor, mask: &MaskPair) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for token in 0..mask.num_tokens() {
        if mask.student.contains(&token) {
            continue;
        }
        for c in 0..pred.cols() {
            let d = pred.at(token, c) - targets.at(token, c);
            total += d * d;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn direct(
    params: &ParamSet,
    plan: &AlignmentPlan,
    student: &BTreeMap<usize, Tensor>,
    teacher: &BTreeMap<usize, Tensor>,
    mask: &MaskPair,
) -> f64 {
    let mut total = 0.0;
    for pair in &plan.pairs {
        let Some(spec) = &pair.direct else { continue };
        let z_stu = rows(&student[&pair.l_stu]);
        let z_tea = rows(&teacher[&pair.l_tea]);
        let mut layer = 0.0;
        for (i, &token) in mask.student.iter().enumerate() {
            let projected = project_token(params, spec, &z_stu[i]);
            layer += token_error(&teacher_row(mask, &z_tea, token), &projected, plan.loss_kind);
        }
        total += layer / mask.student.len() as f64;
    }
    total
}

pub fn generation(
    params: &ParamSet,
    plan: &AlignmentPlan,
    generator: &GeneratorConfig,
    student: &BTreeMap<usize, Tensor>,
    teacher: &BTreeMap<usize, Tensor>,
    mask: &MaskPair,
) -> f64 {
    if mask.diff.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for pair in &plan.pairs {
        let Some((spec, prefix)) = &pair.generation else { continue };
        let z_stu = rows(&student[&pair.l_stu]);
        let z_tea = rows(&teacher[&pair.l_tea]);
        let token = param(params, &format!("{prefix}.mask_token"));
        let width = token.cols();
        let mut seq: Rows = Vec::new();
        for (i, &pos) in mask.student.iter().enumerate() {
            let pe = position_encoding(pos, width);
            seq.push(project_token(params, spec, &z_stu[i]).iter().zip(&pe).map(|(a, b)| a + b).collect());
        }
        for &pos in &mask.diff {
            let pe = position_encoding(pos, width);
            seq.push(token.data().iter().zip(&pe).map(|(a, b)| a + b).collect());
        }
        for b in 0..generator.depth {
            seq = block(params, &format!("{prefix}.blocks.{b}"), generator.heads, &seq);
        }
        let mut layer = 0.0;
        for (k, &pos) in mask.diff.iter().enumerate() {
            let generated = &seq[mask.student.len() + k];
            layer += token_error(&teacher_row(mask, &z_tea, pos), generated, plan.loss_kind);
        }
        total += layer / mask.diff.len() as f64;
    }
    total
}
