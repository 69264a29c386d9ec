//! Joint space-time cube embedding, fixed position encodings and the
//! token-level normalization of reconstruction targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{kernels, Tensor};

/// Epsilon added to the per-token variance of reconstruction targets.
pub const TARGET_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSize {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for PatchSize {
    fn default() -> Self {
        PatchSize { t: 2, h: 16, w: 16 }
    }
}

/// Shape of an input clip. `stride` is the frame sampling stride and is carried as metadata only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
    pub patch: PatchSize,
}

impl ClipSpec {
    /// Single-image mode: one temporal slab made of two identical frames.
    pub fn image(height: usize, width: usize) -> Self {
        ClipSpec {
            frames: 2,
            height,
            width,
            channels: 3,
            stride: 1,
            patch: PatchSize::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.divisibility_violations()
            .into_iter()
            .next()
            .map_or(Ok(()), Err)
    }

    pub(crate) fn divisibility_violations(&self) -> Vec<Error> {
        let axes = [
            ("frames", self.frames, self.patch.t),
            ("height", self.height, self.patch.h),
            ("width", self.width, self.patch.w),
        ];
        let mut out = Vec::new();
        for (axis, size, patch) in axes {
            if patch == 0 || size == 0 || size % patch != 0 {
                out.push(Error::Divisibility { axis, size, patch });
            }
        }
        if self.channels == 0 {
            out.push(Error::Divisibility {
                axis: "channels",
                size: 0,
                patch: 1,
            });
        }
        out
    }

    pub fn grid(&self) -> Result<TokenGrid> {
        self.validate()?;
        Ok(TokenGrid {
            t: self.frames / self.patch.t,
            h: self.height / self.patch.h,
            w: self.width / self.patch.w,
        })
    }

    /// Number of raw values in one cube.
    pub fn cube_len(&self) -> usize {
        self.patch.t * self.patch.h * self.patch.w * self.channels
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }
}

/// The `t × h × w` token lattice. Flattened index is `t·(h·w) + y·w + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        TokenGrid { t, h, w }
    }

    pub fn num_tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Number of spatial positions, i.e. tubes.
    pub fn num_tubes(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        t * self.num_tubes() + y * self.w + x
    }

    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let per_slab = self.num_tubes();
        let t = index / per_slab;
        let rem = index % per_slab;
        (t, rem / self.w, rem % self.w)
    }

    /// Spatial position (tube id) of a flattened token index.
    pub fn tube_of(&self, index: usize) -> usize {
        index % self.num_tubes()
    }
}

/// Raw clip values laid out `frames × height × width × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub spec: ClipSpec,
    pub data: Vec<f64>,
}

impl Clip {
    pub fn new(spec: ClipSpec, data: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if data.len() != spec.clip_len() {
            return Err(Error::InvalidTensor(format!(
                "clip holds {} values, spec requires {}",
                data.len(),
                spec.clip_len()
            )));
        }
        Ok(Clip { spec, data })
    }

    pub fn zeros(spec: ClipSpec) -> Self {
        Clip {
            data: vec![0.0; spec.clip_len()],
            spec,
        }
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        let s = &self.spec;
        self.data[((f * s.height + y) * s.width + x) * s.channels + c]
    }
}

/// Cut the clip into non-overlapping cubes, one row per token in grid order.
/// Inside a row the layout is `(dt, dy, dx, c)`.
pub fn extract_cubes(clip: &Clip) -> Result<Tensor> {
    let spec = clip.spec;
    let grid = spec.grid()?;
    let p = spec.patch;
    let mut data = Vec::with_capacity(spec.clip_len());
    for ti in 0..grid.t {
        for yi in 0..grid.h {
            for xi in 0..grid.w {
                for dt in 0..p.t {
                    for dy in 0..p.h {
                        let f = ti * p.t + dt;
                        let y = yi * p.h + dy;
                        let start = ((f * spec.height + y) * spec.width + xi * p.w) * spec.channels;
                        data.extend_from_slice(&clip.data[start..start + p.w * spec.channels]);
                    }
                }
            }
        }
    }
    Tensor::matrix(grid.num_tokens(), spec.cube_len(), data)
}

/// Affine embedding of every cube: the non-overlapping 3-D convolution.
pub fn cube_embed(clip: &Clip, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let cubes = extract_cubes(clip)?;
    let (n, p) = (cubes.rows(), cubes.cols());
    if weight.shape().len() != 2 || weight.shape()[0] != p || bias.shape() != [weight.shape()[1]] {
        return Err(Error::shape("cube_embed", weight.shape(), bias.shape()));
    }
    let d = weight.shape()[1];
    let mut out = kernels::matmul(cubes.data(), weight.data(), n, p, d);
    for row in out.chunks_mut(d) {
        row.iter_mut().zip(bias.data()).for_each(|(o, b)| *o += b);
    }
    Tensor::matrix(n, d, out)
}

/// Fixed 1-D sinusoidal position encoding, `n × d`.
pub fn sinusoidal_pe(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::InvalidTensor(format!(
            "position encoding width must be even and positive, got {d}"
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::matrix(n, d, data)
}

/// Per-token standardization: `(v − mean) / sqrt(var + ε)` with population variance.
pub fn normalize_target(cubes: &Tensor) -> Tensor {
    let cols = cubes.cols();
    let mut data = Vec::with_capacity(cubes.numel());
    for row in cubes.data().chunks(cols) {
        let (mean, rstd) = kernels::row_stats(row, TARGET_NORM_EPS);
        data.extend(row.iter().map(|v| (v - mean) * rstd));
    }
    Tensor::from_parts(cubes.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(frames: usize, side: usize) -> ClipSpec {
        ClipSpec {
            frames,
            height: side,
            width: side,
            channels: 3,
            stride: 2,
            patch: PatchSize::default(),
        }
    }

    #[test]
    fn grid_sizes() {
        let g = spec(16, 224).grid().unwrap();
        assert_eq!((g.t, g.h, g.w, g.num_tokens()), (8, 14, 14, 1568));
        let g = spec(4, 32).grid().unwrap();
        assert_eq!((g.t, g.h, g.w, g.num_tokens()), (2, 2, 2, 8));
    }

    #[test]
    fn non_divisible_axis_is_named() {
        let mut s = spec(4, 32);
        s.width = 40;
        match s.grid() {
            Err(Error::Divisibility { axis, .. }) => assert_eq!(axis, "width"),
            other => panic!("unexpected {other:?}"),
        }
        s.width = 32;
        s.frames = 5;
        assert!(matches!(s.grid(), Err(Error::Divisibility { axis: "frames", .. })));
    }

    #[test]
    fn image_mode_is_one_slab() {
        let g = ClipSpec::image(64, 48).grid().unwrap();
        assert_eq!((g.t, g.h, g.w), (1, 4, 3));
    }

    #[test]
    fn zero_clip_zero_bias_embeds_to_zero() {
        let s = spec(4, 32);
        let clip = Clip::zeros(s);
        let w = Tensor::full(&[s.cube_len(), 5], 0.3);
        let b = Tensor::zeros(&[5]);
        let out = cube_embed(&clip, &w, &b).unwrap();
        assert_eq!(out.shape(), &[8, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cube_rows_follow_grid_order() {
        // Fill each pixel with the id of the token it belongs to; every cube row must be constant.
        let s = spec(4, 32);
        let grid = s.grid().unwrap();
        let mut clip = Clip::zeros(s);
        for f in 0..s.frames {
            for y in 0..s.height {
                for x in 0..s.width {
                    let id = grid.index(f / 2, y / 16, x / 16) as f64;
                    for c in 0..3 {
                        clip.data[((f * s.height + y) * s.width + x) * 3 + c] = id;
                    }
                }
            }
        }
        let cubes = extract_cubes(&clip).unwrap();
        for i in 0..grid.num_tokens() {
            assert!(cubes.row(i).iter().all(|&v| v == i as f64));
        }
    }

    #[test]
    fn index_round_trip_is_bijective() {
        let grid = spec(16, 224).grid().unwrap();
        let mut seen = vec![false; grid.num_tokens()];
        for i in 0..grid.num_tokens() {
            let (t, y, x) = grid.coords(i);
            assert!(t < grid.t && y < grid.h && x < grid.w);
            assert_eq!(grid.index(t, y, x), i);
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn pe_reference_values() {
        let pe = sinusoidal_pe(4, 2).unwrap();
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(1, 1) - 1f64.cos()).abs() < 1e-15);
        assert!((pe.at(1, 0) - 0.841471).abs() < 1e-6);
        assert!((pe.at(1, 1) - 0.540302).abs() < 1e-6);
        let pe = sinusoidal_pe(7, 6).unwrap();
        for j in 0..6 {
            assert_eq!(pe.at(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(sinusoidal_pe(7, 6).unwrap().to_le_bytes(), pe.to_le_bytes());
        assert!(sinusoidal_pe(4, 3).is_err());
    }

    #[test]
    fn normalize_examples() {
        let t = Tensor::matrix(2, 2, vec![5.0, 5.0, 0.0, 2.0]).unwrap();
        let n = normalize_target(&t);
        assert_eq!(n.row(0), &[0.0, 0.0]);
        // population variance of [0, 2] is 1
        let expect = 1.0 / (1.0 + TARGET_NORM_EPS).sqrt();
        assert!((n.at(1, 0) + expect).abs() < 1e-15 && (n.at(1, 1) - expect).abs() < 1e-15);
        assert!((n.at(1, 1) - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn normalized_tokens_are_standardized(row in proptest::collection::vec(-50.0f64..50.0, 8..40)) {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64;
            prop_assume!(var > 1.0);
            let t = Tensor::matrix(1, row.len(), row.clone()).unwrap();
            let n = normalize_target(&t);
            let m = n.data().iter().sum::<f64>() / row.len() as f64;
            let v = n.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / row.len() as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-6);
        }

        #[test]
        fn normalize_ignores_affine_shift(
            row in proptest::collection::vec(-1000.0f64..1000.0, 8..24),
            a in 0.5f64..10.0,
            b in -20.0f64..20.0,
        ) {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64;
            prop_assume!(var > 1e4);
            let base = Tensor::matrix(1, row.len(), row.clone()).unwrap();
            let shifted = base.map(|x| a * x + b);
            let d = normalize_target(&base).max_abs_diff(&normalize_target(&shifted));
            prop_assert!(d < 1e-9, "{d}");
        }
    }
}
