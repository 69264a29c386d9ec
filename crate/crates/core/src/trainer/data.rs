//! Procedural clips: moving rectangles over smooth colour gradients.

use rand::Rng;

use crate::distill::Sample;
use crate::error::Result;
use crate::masking::{sample_asymmetric_pair, sample_tube_mask, MaskPair};
use crate::rng::{Domain, RngKey};
use crate::tokenize::{extract_cubes, normalize_target, Clip, ClipSpec, TokenGrid};

struct Rect {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    color: Vec<f64>,
}

/// Deterministic clip for `key`, every value in `[0, 1]`.
pub fn synthesize_clip(spec: ClipSpec, key: RngKey) -> Clip {
    let mut rng = key.stream(Domain::Clip);
    let c = spec.channels;
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.25..0.75)).collect();
    let grad: Vec<[f64; 3]> = (0..c)
        .map(|_| {
            // Lit from above: brightness falls off downwards, like most footage.
            [
                rng.random_range(-0.1..0.1),
                -rng.random_range(0.15..0.35),
                rng.random_range(-0.05..0.05),
            ]
        })
        .collect();
    let rects: Vec<Rect> = (0..rng.random_range(1..=2))
        .map(|_| Rect {
            x: rng.random_range(0.0..fw),
            y: rng.random_range(0.0..fh),
            w: rng.random_range(fw / 16.0..fw / 8.0),
            h: rng.random_range(fh / 16.0..fh / 8.0),
            vx: rng.random_range(-fw / 16.0..fw / 16.0),
            vy: rng.random_range(-fh / 16.0..fh / 16.0),
            color: (0..c).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();

    let frames = spec.frames.max(1) as f64;
    let mut data = Vec::with_capacity(spec.clip_len());
    for f in 0..spec.frames {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let cover = rects.iter().rev().find(|r| {
                    let left = (r.x + r.vx * f as f64).rem_euclid(fw);
                    let top = (r.y + r.vy * f as f64).rem_euclid(fh);
                    (px - left).rem_euclid(fw) < r.w && (py - top).rem_euclid(fh) < r.h
                });
                for ch in 0..c {
                    let v = match cover {
                        Some(r) => r.color[ch],
                        None => {
                            let [gx, gy, gt] = grad[ch];
                            base[ch] + gx * (px / fw - 0.5) * 2.0 + gy * (py / fh - 0.5) * 2.0 + gt * f as f64 / frames
                        }
                    };
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Clip::new(spec, data).expect("data length follows the spec")
}

/// Cubes and normalized targets of the clip for `key`.
pub fn clip_tokens(spec: ClipSpec, key: RngKey) -> Result<(crate::Tensor, crate::Tensor)> {
    let cubes = extract_cubes(&synthesize_clip(spec, key))?;
    let targets = normalize_target(&cubes);
    Ok((cubes, targets))
}

/// A distillation sample: clip and nested mask pair both keyed by `key`.
pub fn distill_sample(spec: ClipSpec, grid: &TokenGrid, r_stu: f64, r_tea: f64, key: RngKey) -> Result<Sample> {
    let (cubes, targets) = clip_tokens(spec, key)?;
    let mask = sample_asymmetric_pair(grid, r_stu, r_tea, &mut key.stream(Domain::Mask))?;
    Ok(Sample { cubes, targets, mask })
}

/// A plain masked-autoencoder sample: one tube mask at `ratio`, stored as a pair with equal sets.
pub fn mae_sample(spec: ClipSpec, grid: &TokenGrid, ratio: f64, key: RngKey) -> Result<Sample> {
    let (cubes, targets) = clip_tokens(spec, key)?;
    let visible = sample_tube_mask(grid, ratio, &mut key.stream(Domain::Mask))?;
    let mask = MaskPair::from_sets(*grid, ratio, ratio, visible.clone(), visible)?;
    Ok(Sample { cubes, targets, mask })
}
