//! Teacher pre-training, frozen-teacher distillation, evaluation and checkpoints.
//!
//! Every random draw is keyed by `(seed, step, sample)`, so a run is fully
//! determined by its config, and resuming from a checkpoint at step `k`
//! replays exactly the batches an uninterrupted run would have seen.

mod checkpoint;
mod data;
mod gradcheck;
mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointKind, Header, ManifestEntry, TensorGroup, MAGIC};
pub use data::{clip_tokens, distill_sample, mae_sample, synthesize_clip};
pub use gradcheck::{gradcheck, resolution_floor, GradcheckOptions, GradcheckReport, GroupError};
pub use optim::{adamw_step, lr_schedule, AdamW, Moments, ScheduleKind};

use crate::config::RunConfig;
use crate::distill::{
    batch_teacher_features, build_objective, mae_objective, direct_errors, teacher_encoder, AlignmentPlan,
    LossBreakdown, Sample, Term, ALIGN,
};
use crate::error::{Error, Result};
use crate::network::ParamSet;
use crate::rng::RngKey;
use crate::tokenize::TokenGrid;

/// Epoch value reserved for held-out evaluation samples.
pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub warmup_epochs: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub schedule: ScheduleKind,
    pub seed: u64,
    pub r_stu: f64,
    pub r_tea: f64,
    /// Masking ratio used while pre-training the teacher as a plain masked autoencoder.
    pub teacher_mask_ratio: f64,
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            ScheduleKind::Cosine => lr_schedule(step, self.total_steps(), self.warmup_steps(), self.lr),
            ScheduleKind::Constant => self.lr,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.total_steps() == 0 {
            out.push("epochs × steps_per_epoch must be positive".into());
        }
        if self.warmup_steps() >= self.total_steps() && self.schedule == ScheduleKind::Cosine {
            out.push(format!(
                "warmup ({} steps) must be shorter than training ({} steps)",
                self.warmup_steps(),
                self.total_steps()
            ));
        }
        if self.batch == 0 {
            out.push("batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("eps must be positive, got {}", self.eps));
        }
        out
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub l_recon: f64,
    pub l_dir: f64,
    pub l_gen: f64,
    pub l_total: f64,
    pub wall_ms: u64,
}

impl MetricRecord {
    /// Everything except the wall-clock field.
    pub fn losses(&self) -> (u64, f64, LossBreakdown) {
        (
            self.step,
            self.lr,
            LossBreakdown {
                l_recon: self.l_recon,
                l_dir: self.l_dir,
                l_gen: self.l_gen,
                l_total: self.l_total,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of updates applied so far.
    pub step: u64,
    pub params: ParamSet,
    pub moments: Moments,
}

impl TrainState {
    pub fn new(params: ParamSet) -> Self {
        TrainState {
            step: 0,
            moments: Moments::zeros_like(&params),
            params,
        }
    }
}

enum Phase {
    Pretrain,
    Distill {
        teacher: ParamSet,
        teacher_hash: String,
        plan: AlignmentPlan,
    },
}

pub struct Trainer {
    cfg: RunConfig,
    grid: TokenGrid,
    phase: Phase,
    state: TrainState,
}

/// Shapes the teacher encoder must have under `cfg`.
fn expected_teacher(cfg: &RunConfig) -> ParamSet {
    teacher_encoder(&cfg.model.init_teacher(cfg.cube_len(), 0))
}

impl Trainer {
    /// Plain masked-autoencoder training of the teacher architecture.
    pub fn pretrain(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = cfg.model.init_teacher(cfg.cube_len(), cfg.train.seed);
        Ok(Trainer {
            cfg: cfg.clone(),
            grid: cfg.grid()?,
            phase: Phase::Pretrain,
            state: TrainState::new(params),
        })
    }

    /// Distillation from a frozen teacher. Only the teacher's encoder tensors are used.
    pub fn distill(cfg: &RunConfig, teacher: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let student = cfg.model.init_student(cfg.cube_len(), cfg.train.seed)?;
        Trainer::distill_from(cfg, teacher, TrainState::new(student))
    }

    fn distill_from(cfg: &RunConfig, teacher: &ParamSet, state: TrainState) -> Result<Self> {
        let teacher = teacher_encoder(teacher);
        teacher.check_matches(&expected_teacher(cfg))?;
        Ok(Trainer {
            cfg: cfg.clone(),
            grid: cfg.grid()?,
            phase: Phase::Distill {
                teacher_hash: teacher.content_hash(),
                teacher,
                plan: cfg.model.plan()?,
            },
            state,
        })
    }

    /// Continue a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: &RunConfig, ckpt: &Checkpoint, teacher: Option<&ParamSet>) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let fresh = match ckpt.kind {
            CheckpointKind::Teacher => {
                params.extend(ckpt.group(TensorGroup::Teacher)?.clone());
                cfg.model.init_teacher(cfg.cube_len(), 0)
            }
            CheckpointKind::Student => {
                params.extend(ckpt.group(TensorGroup::Student)?.clone());
                if let Some(aux) = ckpt.groups.get(&TensorGroup::Auxiliary) {
                    params.extend(aux.clone());
                }
                cfg.model.init_student(cfg.cube_len(), 0)?
            }
        };
        params.check_matches(&fresh)?;
        let moments = Moments {
            m: ckpt.group(TensorGroup::AdamM)?.clone(),
            v: ckpt.group(TensorGroup::AdamV)?.clone(),
        };
        moments.m.check_matches(&fresh)?;
        moments.v.check_matches(&fresh)?;
        let state = TrainState {
            step: ckpt.step,
            params,
            moments,
        };
        match ckpt.kind {
            CheckpointKind::Teacher => Ok(Trainer {
                cfg: cfg.clone(),
                grid: cfg.grid()?,
                phase: Phase::Pretrain,
                state,
            }),
            CheckpointKind::Student => {
                let teacher = teacher.ok_or_else(|| Error::Config(vec!["resuming distillation needs the teacher".into()]))?;
                let trainer = Trainer::distill_from(cfg, teacher, state)?;
                if let (Some(expected), Some(found)) = (&ckpt.teacher_hash, trainer.teacher_hash()) {
                    if expected != found {
                        return Err(Error::TeacherMismatch {
                            expected: expected.clone(),
                            found: found.to_string(),
                        });
                    }
                }
                Ok(trainer)
            }
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn params(&self) -> &ParamSet {
        &self.state.params
    }

    pub fn teacher_hash(&self) -> Option<&str> {
        match &self.phase {
            Phase::Pretrain => None,
            Phase::Distill { teacher_hash, .. } => Some(teacher_hash),
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.train.total_steps()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// The batch drawn at `step`.
    pub fn batch(&self, step: u64) -> Result<Vec<Sample>> {
        let t = &self.cfg.train;
        (0..t.batch as u64)
            .map(|i| {
                let key = RngKey::new(t.seed, step, i);
                match self.phase {
                    Phase::Pretrain => mae_sample(self.cfg.clip, &self.grid, t.teacher_mask_ratio, key),
                    Phase::Distill { .. } => distill_sample(self.cfg.clip, &self.grid, t.r_stu, t.r_tea, key),
                }
            })
            .collect()
    }

    /// Loss breakdown and gradients at the current parameters for `batch`.
    pub fn evaluate(&self, batch: &[Sample], term: Term) -> Result<(LossBreakdown, ParamSet)> {
        match &self.phase {
            Phase::Pretrain => mae_objective(&self.cfg.model, &self.state.params, batch),
            Phase::Distill { teacher, plan, .. } => {
                let taps = batch_teacher_features(&self.cfg.model, plan, teacher, batch)?;
                let objective = build_objective(&self.cfg.model, plan, &self.state.params, batch, &taps)?;
                Ok((objective.breakdown, objective.gradients(term)?))
            }
        }
    }

    /// One optimizer update. On a non-finite loss or gradient the state is left untouched.
    pub fn step(&mut self) -> Result<MetricRecord> {
        let start = Instant::now();
        let step = self.state.step;
        let batch = self.batch(step)?;
        let (losses, grads) = self.evaluate(&batch, Term::Total)?;
        if !losses.l_total.is_finite() {
            return Err(Error::Diverged {
                what: "loss".into(),
                step,
            });
        }
        let lr = self.cfg.train.lr_at(step);
        adamw_step(
            &mut self.state.params,
            &grads,
            &mut self.state.moments,
            lr,
            &self.cfg.train.optimizer(),
            step + 1,
        )?;
        self.state.step += 1;
        Ok(MetricRecord {
            step,
            lr,
            l_recon: losses.l_recon,
            l_dir: losses.l_dir,
            l_gen: losses.l_gen,
            l_total: losses.l_total,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Train to the configured step count, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let record = self.step()?;
            sink(&record)?;
        }
        self.verify_teacher()
    }

    /// Fails if the frozen teacher no longer hashes to its value at construction.
    pub fn verify_teacher(&self) -> Result<()> {
        if let Phase::Distill {
            teacher, teacher_hash, ..
        } = &self.phase
        {
            let now = teacher.content_hash();
            if &now != teacher_hash {
                return Err(Error::TeacherMismatch {
                    expected: teacher_hash.clone(),
                    found: now,
                });
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut groups = std::collections::BTreeMap::new();
        let kind = match self.phase {
            Phase::Pretrain => {
                groups.insert(TensorGroup::Teacher, self.state.params.clone());
                CheckpointKind::Teacher
            }
            Phase::Distill { .. } => {
                let aux_prefix = format!("{ALIGN}.");
                let mut student = ParamSet::new();
                let mut aux = ParamSet::new();
                for (name, t) in self.state.params.iter() {
                    let slot = if name.starts_with(&aux_prefix) { &mut aux } else { &mut student };
                    slot.insert(name, t.clone());
                }
                groups.insert(TensorGroup::Student, student);
                if !aux.is_empty() {
                    groups.insert(TensorGroup::Auxiliary, aux);
                }
                CheckpointKind::Student
            }
        };
        groups.insert(TensorGroup::AdamM, self.state.moments.m.clone());
        groups.insert(TensorGroup::AdamV, self.state.moments.v.clone());
        Checkpoint {
            kind,
            step: self.state.step,
            config: self.cfg.to_json(),
            teacher_hash: self.teacher_hash().map(str::to_string),
            groups,
        }
    }
}

/// Student-side parameters held by a checkpoint, checked against `cfg`.
pub fn student_params(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<ParamSet> {
    if ckpt.kind != CheckpointKind::Student {
        return Err(Error::CorruptHeader("expected a student checkpoint".into()));
    }
    let mut params = ckpt.group(TensorGroup::Student)?.clone();
    if let Some(aux) = ckpt.groups.get(&TensorGroup::Auxiliary) {
        params.extend(aux.clone());
    }
    params.check_matches(&cfg.model.init_student(cfg.cube_len(), 0)?)?;
    Ok(params)
}

/// Teacher encoder held by a checkpoint, checked against `cfg`.
pub fn teacher_params(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<ParamSet> {
    if ckpt.kind != CheckpointKind::Teacher {
        return Err(Error::CorruptHeader("expected a teacher checkpoint".into()));
    }
    let teacher = teacher_encoder(ckpt.group(TensorGroup::Teacher)?);
    teacher.check_matches(&expected_teacher(cfg))?;
    Ok(teacher)
}

/// Mean direct-alignment error per layer pair over `n_samples` held-out samples.
///
/// Samples and masks are keyed by the config seed and a reserved epoch, so the
/// set is disjoint from every training batch and identical across calls.
pub fn evaluate_alignment(cfg: &RunConfig, student: &ParamSet, teacher: &ParamSet, n_samples: usize) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::Config(vec!["evaluation needs at least one sample".into()]));
    }
    let teacher = teacher_encoder(teacher);
    teacher.check_matches(&expected_teacher(cfg))?;
    student.check_matches(&cfg.model.init_student(cfg.cube_len(), 0)?)?;
    let plan = cfg.model.plan()?;
    let grid = cfg.grid()?;
    let t = &cfg.train;
    let mut sums = vec![0.0; plan.pairs.len()];
    for i in 0..n_samples as u64 {
        let sample = distill_sample(cfg.clip, &grid, t.r_stu, t.r_tea, RngKey::new(t.seed, EVAL_EPOCH, i))?;
        for (s, e) in sums.iter_mut().zip(direct_errors(&cfg.model, &plan, student, &teacher, &sample)?) {
            *s += e;
        }
    }
    Ok(sums.into_iter().map(|s| s / n_samples as f64).collect())
}

/// Mean reconstruction loss of a teacher MAE (encoder and decoder) over
/// `n_samples` held-out samples masked at the teacher ratio.
pub fn evaluate_reconstruction(cfg: &RunConfig, params: &ParamSet, n_samples: usize) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config(vec!["evaluation needs at least one sample".into()]));
    }
    params.check_matches(&cfg.model.init_teacher(cfg.cube_len(), 0))?;
    let grid = cfg.grid()?;
    let t = &cfg.train;
    let mut sum = 0.0;
    for i in 0..n_samples as u64 {
        let sample = mae_sample(cfg.clip, &grid, t.teacher_mask_ratio, RngKey::new(t.seed, EVAL_EPOCH, i))?;
        sum += mae_objective(&cfg.model, params, std::slice::from_ref(&sample))?.0.l_recon;
    }
    Ok(sum / n_samples as f64)
}
