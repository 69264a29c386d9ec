//! Mask exports: one plain (P2) graymap per temporal slab per branch, at frame
//! resolution, white where the branch sees the token, plus a JSON sidecar
//! holding the [`MaskPair`] itself.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;

use amd_core::config::RunConfig;
use amd_core::masking::{sample_asymmetric_pair, MaskPair};
use amd_core::rng::{Domain, RngKey};

pub const WHITE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Student,
    Teacher,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Student => "student",
            Branch::Teacher => "teacher",
        }
    }
}

pub fn image_path(dir: &Path, sample: usize, branch: Branch, slab: usize) -> PathBuf {
    dir.join(format!("mask_{sample:04}_{}_t{slab}.pgm", branch.name()))
}

pub fn sidecar_path(dir: &Path, sample: usize) -> PathBuf {
    dir.join(format!("mask_{sample:04}.json"))
}

/// The pair drawn for sample `index`; the same draw a training batch at step 0 makes.
pub fn sample_pair(cfg: &RunConfig, index: usize) -> amd_core::Result<MaskPair> {
    let t = &cfg.train;
    let key = RngKey::new(t.seed, 0, index as u64);
    sample_asymmetric_pair(&cfg.grid()?, t.r_stu, t.r_tea, &mut key.stream(Domain::Mask))
}

/// Plain graymap of one slab, each token drawn as a patch-sized block.
pub fn render_slab(cfg: &RunConfig, pair: &MaskPair, branch: Branch, slab: usize) -> String {
    let grid = pair.grid;
    let (ph, pw) = (cfg.clip.patch.h, cfg.clip.patch.w);
    let (height, width) = (grid.h * ph, grid.w * pw);
    let visible = match branch {
        Branch::Student => &pair.student,
        Branch::Teacher => &pair.teacher,
    };
    let mut out = format!("P2\n{width} {height}\n{WHITE}\n");
    for y in 0..height {
        let row: Vec<String> = (0..width)
            .map(|x| {
                let token = grid.index(slab, y / ph, x / pw);
                let v = if visible.binary_search(&token).is_ok() { WHITE } else { 0 };
                v.to_string()
            })
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

/// Parse a plain graymap back into `(width, height, pixels)`.
pub fn parse_pgm(text: &str) -> anyhow::Result<(usize, usize, Vec<u8>)> {
    let mut fields = text.split_whitespace();
    anyhow::ensure!(fields.next() == Some("P2"), "not a plain graymap");
    let mut next = |what: &str| -> anyhow::Result<usize> {
        fields
            .next()
            .with_context(|| format!("missing {what}"))?
            .parse()
            .with_context(|| format!("bad {what}"))
    };
    let (width, height, _max) = (next("width")?, next("height")?, next("maxval")?);
    let pixels = (0..width * height)
        .map(|_| next("pixel").map(|v| v as u8))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((width, height, pixels))
}

/// Write `count` samples into `dir` (created if needed); returns the number of files written.
pub fn export(cfg: &RunConfig, count: usize, dir: &Path) -> anyhow::Result<usize> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = 0;
    for i in 0..count {
        let pair = sample_pair(cfg, i)?;
        for branch in [Branch::Student, Branch::Teacher] {
            for slab in 0..pair.grid.t {
                let path = image_path(dir, i, branch, slab);
                std::fs::write(&path, render_slab(cfg, &pair, branch, slab))
                    .with_context(|| format!("writing {}", path.display()))?;
                written += 1;
            }
        }
        let path = sidecar_path(dir, i);
        std::fs::write(&path, serde_json::to_string_pretty(&pair)?).with_context(|| format!("writing {}", path.display()))?;
        written += 1;
    }
    Ok(written)
}
