//! Run configuration: one JSON document, optionally layered over a named preset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::distill::{map_layers, AlignmentConfig, LayerChoice, ModelConfig, Strategy};
use crate::error::{Error, Result};
use crate::masking::{ratio_pair_violations, visible_tube_count};
use crate::network::{DecoderConfig, EncoderConfig, GeneratorConfig};
use crate::tokenize::{ClipSpec, PatchSize, TokenGrid};
use crate::trainer::{ScheduleKind, TrainConfig};

pub const PRESETS: &[&str] = &["desk", "paper-pretrain"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the preset this config was layered over, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub clip: ClipSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(desk()),
            "paper-pretrain" => paper_pretrain(),
            other => Err(Error::Config(vec![format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            )])),
        }
    }

    /// Parse a config document. A top-level `"preset"` key selects the base
    /// that the remaining keys are deep-merged into; unknown keys are rejected.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("invalid JSON: {e}")]))?;
        let merged = match doc.get("preset") {
            Some(Value::String(name)) => {
                let mut base = serde_json::to_value(RunConfig::preset(name)?)?;
                merge(&mut base, doc.clone());
                base
            }
            Some(other) => return Err(Error::Config(vec![format!("preset must be a string, got {other}")])),
            None => doc,
        };
        serde_json::from_value(merged).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json_str(&text)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn grid(&self) -> Result<TokenGrid> {
        self.clip.grid()
    }

    pub fn cube_len(&self) -> usize {
        self.clip.cube_len()
    }

    /// Every violated rule at once, or `Ok` when the config is usable.
    pub fn validate(&self) -> Result<()> {
        let mut out: Vec<String> = self.clip.divisibility_violations().iter().map(ToString::to_string).collect();
        out.extend(self.model.violations());
        if let Ok(grid) = self.clip.grid() {
            out.extend(ratio_pair_violations(&grid, self.train.r_stu, self.train.r_tea));
            if let Err(e) = visible_tube_count(&grid, self.train.teacher_mask_ratio) {
                out.push(format!("teacher_mask_ratio: {e}"));
            }
        }
        out.extend(self.train.violations());
        if out.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(out))
        }
    }
}

/// Recursive object merge; anything that is not an object on both sides is replaced.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn encoder(depth: usize, width: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        depth,
        width,
        heads,
        mlp_ratio: 4,
    }
}

fn decoder(depth: usize, width: usize, heads: usize) -> DecoderConfig {
    DecoderConfig {
        depth,
        width,
        heads,
        mlp_ratio: 4,
    }
}

/// Small enough for single-core training and finite-difference sweeps.
fn desk() -> RunConfig {
    let student = encoder(4, 32, 4);
    let teacher = encoder(8, 64, 4);
    RunConfig {
        preset: Some("desk".into()),
        clip: ClipSpec {
            frames: 4,
            height: 64,
            width: 64,
            channels: 3,
            stride: 1,
            patch: PatchSize::default(),
        },
        model: ModelConfig {
            student,
            teacher,
            decoder: decoder(2, 24, 4),
            teacher_decoder: decoder(2, 32, 4),
            generator: GeneratorConfig {
                depth: 2,
                heads: 4,
                mlp_ratio: 4,
            },
            alignment: AlignmentConfig::new(
                Strategy::Serial,
                map_layers(student.depth, teacher.depth, LayerChoice::MiddleAndLast).expect("even depths"),
            ),
            tap_after_final_norm: false,
        },
        train: TrainConfig {
            epochs: 40,
            steps_per_epoch: 10,
            warmup_epochs: 4,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            eps: 1e-8,
            schedule: ScheduleKind::Cosine,
            seed: 0,
            r_stu: 0.9,
            r_tea: 0.75,
            teacher_mask_ratio: 0.9,
        },
    }
}

/// ViT-B student distilled from a ViT-L teacher at the published pre-training schedule.
fn paper_pretrain() -> Result<RunConfig> {
    let student = encoder(12, 768, 12);
    let teacher = encoder(24, 1024, 16);
    Ok(RunConfig {
        preset: Some("paper-pretrain".into()),
        clip: ClipSpec {
            frames: 16,
            height: 224,
            width: 224,
            channels: 3,
            stride: 2,
            patch: PatchSize::default(),
        },
        model: ModelConfig {
            student,
            teacher,
            decoder: decoder(4, 384, 6),
            teacher_decoder: decoder(4, 512, 8),
            generator: GeneratorConfig {
                depth: 2,
                heads: 16,
                mlp_ratio: 4,
            },
            alignment: AlignmentConfig::new(
                Strategy::Serial,
                map_layers(student.depth, teacher.depth, LayerChoice::MiddleAndLast)?,
            ),
            tap_after_final_norm: false,
        },
        train: TrainConfig {
            epochs: 800,
            steps_per_epoch: 83,
            warmup_epochs: 40,
            batch: 2048,
            lr: 1.2e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            eps: 1e-8,
            schedule: ScheduleKind::Cosine,
            seed: 0,
            r_stu: 0.9,
            r_tea: 0.75,
            teacher_mask_ratio: 0.9,
        },
    })
}
