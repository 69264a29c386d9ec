//! Shared fixtures for the criterion benches.

use amd_core::config::RunConfig;
use amd_core::distill::{batch_teacher_features, teacher_encoder, AlignmentPlan, Sample, TeacherTaps};
use amd_core::network::{Initializer, ParamSet};
use amd_core::rng::RngKey;
use amd_core::trainer::distill_sample;
use amd_core::Tensor;

/// A desk-preset batch with its student, teacher and precomputed teacher taps.
pub struct DeskBatch {
    pub cfg: RunConfig,
    pub plan: AlignmentPlan,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub batch: Vec<Sample>,
    pub taps: Vec<TeacherTaps>,
}

impl DeskBatch {
    pub fn new(batch_size: usize) -> Self {
        let cfg = RunConfig::preset("desk").expect("desk preset");
        let plan = cfg.model.plan().expect("desk plan");
        let grid = cfg.grid().expect("desk grid");
        let student = cfg.model.init_student(cfg.cube_len(), 0).expect("student init");
        let teacher = teacher_encoder(&cfg.model.init_teacher(cfg.cube_len(), 1));
        let t = &cfg.train;
        let batch: Vec<Sample> = (0..batch_size as u64)
            .map(|i| distill_sample(cfg.clip, &grid, t.r_stu, t.r_tea, RngKey::new(0, 0, i)).expect("sample"))
            .collect();
        let taps = batch_teacher_features(&cfg.model, &plan, &teacher, &batch).expect("teacher taps");
        DeskBatch {
            cfg,
            plan,
            student,
            teacher,
            batch,
            taps,
        }
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Initializer::new(seed).uniform(&[rows, cols], 1.0)
}
