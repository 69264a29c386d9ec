//! Alignment strategies, the three loss terms and the combined objective.
//!
//! The teacher encoder runs in its own inference graph; only its tapped
//! features enter the student's graph, as constants. Nothing the student's
//! backward pass touches can therefore belong to the teacher.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskPair;
use crate::network::{
    decoder_forward, encode_visible, generator_forward, init_decoder, init_encoder, init_generator,
    init_projection, project, Bound, DecoderConfig, EncoderConfig, FeatureTap, GeneratorConfig, Initializer,
    ParamSet, ProjectionMode,
};
use crate::numcore::{Graph, Tensor, Var};
use crate::rng::RngKey;

pub const STUDENT: &str = "student";
pub const DECODER: &str = "decoder";
pub const ALIGN: &str = "align";
pub const TEACHER: &str = "teacher";
pub const TEACHER_DECODER: &str = "teacher_decoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DirectOnly,
    GenerationOnly,
    Parallel,
    Serial,
}

impl Strategy {
    pub fn uses_direct(self) -> bool {
        !matches!(self, Strategy::GenerationOnly)
    }

    pub fn uses_generation(self) -> bool {
        !matches!(self, Strategy::DirectOnly)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerChoice {
    LastOnly,
    MiddleAndLast,
}

/// Student/teacher layer pairs to align, 1-based.
pub fn map_layers(l_stu: usize, l_tea: usize, choice: LayerChoice) -> Result<Vec<(usize, usize)>> {
    match choice {
        LayerChoice::LastOnly => {
            if l_stu == 0 || l_tea == 0 {
                return Err(Error::Config(vec!["encoders need at least one block to align".into()]));
            }
            Ok(vec![(l_stu, l_tea)])
        }
        LayerChoice::MiddleAndLast => {
            let mut errs = Vec::new();
            for (name, l) in [("student", l_stu), ("teacher", l_tea)] {
                if l < 2 || l % 2 != 0 {
                    errs.push(format!("middle_and_last needs an even {name} depth of at least 2, got {l}"));
                }
            }
            if !errs.is_empty() {
                return Err(Error::Config(errs));
            }
            Ok(vec![(l_stu / 2, l_tea / 2), (l_stu, l_tea)])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub strategy: Strategy,
    pub layer_pairs: Vec<(usize, usize)>,
    pub share_projection: bool,
    #[serde(default)]
    pub loss_kind: LossKind,
}

impl AlignmentConfig {
    /// A config whose sharing flag follows the strategy's rule.
    pub fn new(strategy: Strategy, layer_pairs: Vec<(usize, usize)>) -> Self {
        AlignmentConfig {
            strategy,
            layer_pairs,
            share_projection: strategy == Strategy::Serial,
            loss_kind: LossKind::Mse,
        }
    }

    pub fn violations(&self, l_stu: usize, l_tea: usize) -> Vec<String> {
        let mut out = self.sharing_violations();
        for &(s, t) in &self.layer_pairs {
            if s == 0 || s > l_stu {
                out.push(format!("student layer {s} outside 1..={l_stu}"));
            }
            if t == 0 || t > l_tea {
                out.push(format!("teacher layer {t} outside 1..={l_tea}"));
            }
        }
        out
    }

    /// Rules that do not depend on the encoders' depths.
    pub fn sharing_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match (self.strategy, self.share_projection) {
            (Strategy::Serial, false) => out.push(
                "strategy serial requires share_projection = true: the generation branch reuses the direct-alignment projection"
                    .into(),
            ),
            (Strategy::Parallel, true) => out.push(
                "strategy parallel requires share_projection = false: direct and generation alignment use separate projections"
                    .into(),
            ),
            _ => {}
        }
        if self.layer_pairs.is_empty() {
            out.push("alignment needs at least one layer pair".into());
        }
        out
    }
}

/// Projection parameters under `prefix`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionSpec {
    pub prefix: String,
    pub mode: ProjectionMode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPlan {
    pub l_stu: usize,
    pub l_tea: usize,
    pub direct: Option<ProjectionSpec>,
    /// Projection feeding the generator, and the generator's prefix.
    pub generation: Option<(ProjectionSpec, String)>,
}

/// Parameter names and projection modes resolved from an [`AlignmentConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPlan {
    pub pairs: Vec<PairPlan>,
    pub loss_kind: LossKind,
}

impl AlignmentPlan {
    pub fn new(cfg: &AlignmentConfig) -> Result<Self> {
        let bad = cfg.sharing_violations();
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let spec = |prefix: String, mode| ProjectionSpec { prefix, mode };
        let pairs = cfg
            .layer_pairs
            .iter()
            .enumerate()
            .map(|(i, &(l_stu, l_tea))| {
                let base = format!("{ALIGN}.{i}");
                let gen = format!("{base}.gen");
                let (direct, generation) = match cfg.strategy {
                    Strategy::DirectOnly => (Some(spec(format!("{base}.proj_dir"), ProjectionMode::Mlp2)), None),
                    Strategy::GenerationOnly => (None, Some((spec(format!("{base}.proj_gen"), ProjectionMode::Linear), gen))),
                    Strategy::Parallel => (
                        Some(spec(format!("{base}.proj_dir"), ProjectionMode::Linear)),
                        Some((spec(format!("{base}.proj_gen"), ProjectionMode::Linear), gen)),
                    ),
                    Strategy::Serial => {
                        let shared = spec(format!("{base}.proj"), ProjectionMode::Linear);
                        (Some(shared.clone()), Some((shared, gen)))
                    }
                };
                PairPlan {
                    l_stu,
                    l_tea,
                    direct,
                    generation,
                }
            })
            .collect();
        Ok(AlignmentPlan {
            pairs,
            loss_kind: cfg.loss_kind,
        })
    }

    /// The same plan with the generation branch dropped; projections keep their names.
    pub fn without_generation(&self) -> Self {
        AlignmentPlan {
            pairs: self
                .pairs
                .iter()
                .map(|p| PairPlan {
                    generation: None,
                    ..p.clone()
                })
                .collect(),
            loss_kind: self.loss_kind,
        }
    }

    pub fn student_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.l_stu).collect()
    }

    pub fn teacher_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.l_tea).collect()
    }

    /// Initialize every projection and generator the plan refers to.
    pub fn init_params(
        &self,
        params: &mut ParamSet,
        init: &mut Initializer,
        student_width: usize,
        teacher_width: usize,
        generator: &GeneratorConfig,
    ) {
        for pair in &self.pairs {
            let mut projections: Vec<&ProjectionSpec> = pair.direct.iter().collect();
            if let Some((proj, gen)) = &pair.generation {
                projections.push(proj);
                init_generator(params, init, gen, generator, teacher_width);
            }
            for proj in projections {
                if !params.contains(&format!("{}.weight", proj.prefix))
                    && !params.contains(&format!("{}.fc1.weight", proj.prefix))
                {
                    init_projection(params, init, &proj.prefix, proj.mode, student_width, teacher_width);
                }
            }
        }
    }

    /// Projection used to score direct alignment: the direct one, or the generator's when there is none.
    fn scoring_projection(pair: &PairPlan) -> &ProjectionSpec {
        pair.direct
            .as_ref()
            .or(pair.generation.as_ref().map(|(p, _)| p))
            .expect("every pair has at least one projection")
    }
}

/// Every architecture and alignment choice of a distillation setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub student: EncoderConfig,
    pub teacher: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Decoder used only while pre-training the teacher as a plain masked autoencoder.
    pub teacher_decoder: DecoderConfig,
    pub generator: GeneratorConfig,
    pub alignment: AlignmentConfig,
    /// Take the last-layer tap after the encoder's final norm instead of the raw block output.
    #[serde(default)]
    pub tap_after_final_norm: bool,
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = self.student.violations("student");
        out.extend(self.teacher.violations("teacher"));
        out.extend(self.decoder.violations("decoder"));
        out.extend(self.teacher_decoder.violations("teacher_decoder"));
        out.extend(self.generator.violations(self.teacher.width));
        out.extend(self.alignment.violations(self.student.depth, self.teacher.depth));
        out
    }

    pub fn plan(&self) -> Result<AlignmentPlan> {
        AlignmentPlan::new(&self.alignment)
    }

    /// Student encoder, student decoder and every auxiliary alignment module.
    ///
    /// Encoder and decoder draw from their own streams, so they do not depend on the strategy.
    pub fn init_student(&self, cube_len: usize, seed: u64) -> Result<ParamSet> {
        let mut params = ParamSet::new();
        let mut init = Initializer::from_key(RngKey::new(seed, 0, 1));
        init_encoder(&mut params, &mut init, STUDENT, &self.student, cube_len);
        let mut init = Initializer::from_key(RngKey::new(seed, 0, 2));
        init_decoder(&mut params, &mut init, DECODER, &self.decoder, self.student.width, cube_len);
        let mut init = Initializer::from_key(RngKey::new(seed, 0, 3));
        self.plan()?
            .init_params(&mut params, &mut init, self.student.width, self.teacher.width, &self.generator);
        Ok(params)
    }

    /// Teacher encoder plus the decoder it is pre-trained with.
    pub fn init_teacher(&self, cube_len: usize, seed: u64) -> ParamSet {
        let mut params = ParamSet::new();
        let mut init = Initializer::from_key(RngKey::new(seed, 0, 4));
        init_encoder(&mut params, &mut init, TEACHER, &self.teacher, cube_len);
        let mut init = Initializer::from_key(RngKey::new(seed, 0, 5));
        init_decoder(&mut params, &mut init, TEACHER_DECODER, &self.teacher_decoder, self.teacher.width, cube_len);
        params
    }
}

/// The encoder part of a teacher parameter set.
pub fn teacher_encoder(params: &ParamSet) -> ParamSet {
    params.subset(&format!("{TEACHER}."))
}

/// One training example: token cubes, their normalized targets and a mask pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub cubes: Tensor,
    pub targets: Tensor,
    pub mask: MaskPair,
}

/// Teacher features per tapped layer, one row per teacher-visible token.
pub type TeacherTaps = BTreeMap<usize, Tensor>;

/// Run the frozen teacher encoder on the teacher-visible tokens of `sample`.
pub fn teacher_features(cfg: &ModelConfig, layers: &[usize], teacher: &ParamSet, sample: &Sample) -> Result<TeacherTaps> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, teacher, false);
    let out = encode_visible(
        &mut g,
        &p,
        TEACHER,
        &cfg.teacher,
        &sample.cubes,
        &sample.mask.teacher,
        layers,
        cfg.tap_after_final_norm,
    )?;
    Ok(out.taps.values(&g))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_recon: f64,
    pub l_dir: f64,
    pub l_gen: f64,
    pub l_total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Recon,
    Dir,
    Gen,
    Total,
}

impl std::str::FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recon" => Ok(Term::Recon),
            "dir" => Ok(Term::Dir),
            "gen" => Ok(Term::Gen),
            "total" => Ok(Term::Total),
            other => Err(Error::Config(vec![format!("unknown loss term `{other}`")])),
        }
    }
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Term::Recon => "recon",
            Term::Dir => "dir",
            Term::Gen => "gen",
            Term::Total => "total",
        })
    }
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(zero(g));
    };
    rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
}

/// Per-token error summed over channels, averaged over tokens.
///
/// This is the single place that decides how alignment residuals are reduced.
pub fn alignment_error(g: &mut Graph, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape("alignment_error", g.shape(pred), g.shape(target)));
    }
    let rows = g.value(pred).rows();
    let per_entry = match kind {
        LossKind::Mse => g.squared_difference(pred, target)?,
        LossKind::L1 => {
            let d = g.sub(pred, target)?;
            g.abs(d)?
        }
    };
    let total = g.sum(per_entry)?;
    g.scale(total, 1.0 / rows as f64)
}

/// Mean squared error over every entry of the student-masked tokens.
pub fn recon_loss(g: &mut Graph, pred: Var, targets: &Tensor, mask: &MaskPair) -> Result<Var> {
    if g.shape(pred) != targets.shape() {
        return Err(Error::shape("recon_loss", g.shape(pred), targets.shape()));
    }
    let masked = mask.student_masked();
    if masked.is_empty() {
        return Ok(zero(g));
    }
    let p = g.gather_rows(pred, &masked)?;
    let t = g.constant(targets.gather_rows(&masked)?);
    let sq = g.squared_difference(p, t)?;
    g.mean(sq)
}

fn check_rows(g: &Graph, v: Var, expected: usize, what: &str) -> Result<()> {
    let found = g.value(v).rows();
    if found != expected {
        return Err(Error::Mask(format!("{what} has {found} rows, mask expects {expected}")));
    }
    Ok(())
}

/// Teacher rows at the student's tokens vs. projected student features, one term per pair.
pub fn direct_align_terms(
    g: &mut Graph,
    p: &Bound,
    plan: &AlignmentPlan,
    student_taps: &FeatureTap,
    teacher_taps: &BTreeMap<usize, Var>,
    mask: &MaskPair,
) -> Result<Vec<Var>> {
    let rows = mask.student_rows_in_teacher();
    let mut terms = Vec::with_capacity(plan.pairs.len());
    for pair in &plan.pairs {
        let proj = AlignmentPlan::scoring_projection(pair);
        let z_stu = student_taps.get(pair.l_stu)?;
        let z_tea = teacher_tap(teacher_taps, pair.l_tea)?;
        check_rows(g, z_stu, mask.student.len(), "student tap")?;
        check_rows(g, z_tea, mask.teacher.len(), "teacher tap")?;
        let projected = project(g, p, &proj.prefix, proj.mode, z_stu)?;
        let target = g.gather_rows(z_tea, &rows)?;
        terms.push(alignment_error(g, projected, target, plan.loss_kind)?);
    }
    Ok(terms)
}

fn teacher_tap(taps: &BTreeMap<usize, Var>, layer: usize) -> Result<Var> {
    taps.get(&layer)
        .copied()
        .ok_or_else(|| Error::InvalidTensor(format!("teacher layer {layer} was not tapped")))
}

/// Direct alignment summed over the plan's layer pairs; zero when the plan has no direct branch.
pub fn direct_align_loss(
    g: &mut Graph,
    p: &Bound,
    plan: &AlignmentPlan,
    student_taps: &FeatureTap,
    teacher_taps: &BTreeMap<usize, Var>,
    mask: &MaskPair,
) -> Result<Var> {
    let direct = AlignmentPlan {
        pairs: plan.pairs.iter().filter(|p| p.direct.is_some()).cloned().collect(),
        loss_kind: plan.loss_kind,
    };
    let terms = direct_align_terms(g, p, &direct, student_taps, teacher_taps, mask)?;
    sum_scalars(g, &terms)
}

pub struct GenerationLoss {
    pub loss: Var,
    /// Generator sequence length per layer pair.
    pub seq_lens: Vec<usize>,
}

/// Generated vs. teacher features at the difference tokens, summed over layer pairs.
#[allow(clippy::too_many_arguments)]
pub fn gen_align_loss(
    g: &mut Graph,
    p: &Bound,
    plan: &AlignmentPlan,
    generator: &GeneratorConfig,
    student_taps: &FeatureTap,
    teacher_taps: &BTreeMap<usize, Var>,
    mask: &MaskPair,
) -> Result<GenerationLoss> {
    let rows = mask.diff_rows_in_teacher();
    let mut terms = Vec::new();
    let mut seq_lens = Vec::new();
    for pair in &plan.pairs {
        let Some((proj, gen)) = &pair.generation else {
            continue;
        };
        let z_stu = student_taps.get(pair.l_stu)?;
        let z_tea = teacher_tap(teacher_taps, pair.l_tea)?;
        check_rows(g, z_stu, mask.student.len(), "student tap")?;
        check_rows(g, z_tea, mask.teacher.len(), "teacher tap")?;
        let z_tilde = project(g, p, &proj.prefix, proj.mode, z_stu)?;
        let out = generator_forward(g, p, gen, generator, z_tilde, &mask.student, &mask.diff, &mask.grid)?;
        seq_lens.push(out.seq_len);
        let Some(generated) = out.generated else {
            continue;
        };
        check_rows(g, generated, mask.diff.len(), "generator output")?;
        let target = g.gather_rows(z_tea, &rows)?;
        terms.push(alignment_error(g, generated, target, plan.loss_kind)?);
    }
    Ok(GenerationLoss {
        loss: sum_scalars(g, &terms)?,
        seq_lens,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub recon: Var,
    pub dir: Var,
    pub gen: Var,
    pub total: Var,
}

impl TermVars {
    pub fn get(&self, term: Term) -> Var {
        match term {
            Term::Recon => self.recon,
            Term::Dir => self.dir,
            Term::Gen => self.gen,
            Term::Total => self.total,
        }
    }
}

/// The student-side graph of one batch, ready for backward.
pub struct Objective {
    pub graph: Graph,
    pub bound: Bound,
    pub terms: TermVars,
    pub breakdown: LossBreakdown,
    /// Generator sequence lengths, per sample and layer pair.
    pub generator_seq_lens: Vec<Vec<usize>>,
}

impl Objective {
    /// Gradient of one term for every trainable tensor, by name.
    pub fn gradients(&self, term: Term) -> Result<ParamSet> {
        let grads = self.graph.backward(self.terms.get(term))?;
        Ok(self.bound.collect(&grads))
    }
}

/// Build the batch-averaged objective given precomputed teacher features.
///
/// `l_total` is formed as `(l_recon + l_dir) + l_gen` in the graph, so it equals
/// the same f64 sum of the reported terms exactly.
pub fn build_objective(
    cfg: &ModelConfig,
    plan: &AlignmentPlan,
    student: &ParamSet,
    batch: &[Sample],
    teacher_taps: &[TeacherTaps],
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Config(vec!["batch must not be empty".into()]));
    }
    if batch.len() != teacher_taps.len() {
        return Err(Error::InvalidTensor(format!(
            "{} samples but teacher features for {}",
            batch.len(),
            teacher_taps.len()
        )));
    }
    let mut g = Graph::new();
    let p = Bound::new(&mut g, student, true);
    let (mut recon, mut dir, mut gen) = (Vec::new(), Vec::new(), Vec::new());
    let mut seq_lens = Vec::new();
    for (sample, taps) in batch.iter().zip(teacher_taps) {
        let out = encode_visible(
            &mut g,
            &p,
            STUDENT,
            &cfg.student,
            &sample.cubes,
            &sample.mask.student,
            &plan.student_layers(),
            cfg.tap_after_final_norm,
        )?;
        let pred = decoder_forward(&mut g, &p, DECODER, &cfg.decoder, out.normed, &sample.mask.student, &sample.mask.grid)?;
        recon.push(recon_loss(&mut g, pred, &sample.targets, &sample.mask)?);
        let tea: BTreeMap<usize, Var> = taps.iter().map(|(&l, t)| (l, g.constant(t.clone()))).collect();
        dir.push(direct_align_loss(&mut g, &p, plan, &out.taps, &tea, &sample.mask)?);
        let generation = gen_align_loss(&mut g, &p, plan, &cfg.generator, &out.taps, &tea, &sample.mask)?;
        gen.push(generation.loss);
        seq_lens.push(generation.seq_lens);
    }
    let inv = 1.0 / batch.len() as f64;
    let mean = |g: &mut Graph, terms: &[Var]| -> Result<Var> {
        let s = sum_scalars(g, terms)?;
        g.scale(s, inv)
    };
    let recon = mean(&mut g, &recon)?;
    let dir = mean(&mut g, &dir)?;
    let gen = mean(&mut g, &gen)?;
    let partial = g.add(recon, dir)?;
    let total = g.add(partial, gen)?;
    let breakdown = LossBreakdown {
        l_recon: g.value(recon).item(),
        l_dir: g.value(dir).item(),
        l_gen: g.value(gen).item(),
        l_total: g.value(total).item(),
    };
    Ok(Objective {
        graph: g,
        bound: p,
        terms: TermVars {
            recon,
            dir,
            gen,
            total,
        },
        breakdown,
        generator_seq_lens: seq_lens,
    })
}

/// Teacher features for every sample of a batch.
pub fn batch_teacher_features(
    cfg: &ModelConfig,
    plan: &AlignmentPlan,
    teacher: &ParamSet,
    batch: &[Sample],
) -> Result<Vec<TeacherTaps>> {
    let layers = plan.teacher_layers();
    batch
        .iter()
        .map(|s| teacher_features(cfg, &layers, teacher, s))
        .collect()
}

/// Loss breakdown and gradients of `l_total` for every student-side tensor.
pub fn amd_objective(
    cfg: &ModelConfig,
    plan: &AlignmentPlan,
    student: &ParamSet,
    teacher: &ParamSet,
    batch: &[Sample],
) -> Result<(LossBreakdown, ParamSet)> {
    let taps = batch_teacher_features(cfg, plan, teacher, batch)?;
    let objective = build_objective(cfg, plan, student, batch, &taps)?;
    let grads = objective.gradients(Term::Total)?;
    Ok((objective.breakdown, grads))
}

/// Reconstruction-only objective of the teacher architecture, for its own pre-training.
pub fn mae_objective(cfg: &ModelConfig, params: &ParamSet, batch: &[Sample]) -> Result<(LossBreakdown, ParamSet)> {
    if batch.is_empty() {
        return Err(Error::Config(vec!["batch must not be empty".into()]));
    }
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, true);
    let mut recon = Vec::with_capacity(batch.len());
    for sample in batch {
        let visible = &sample.mask.teacher;
        let out = encode_visible(&mut g, &p, TEACHER, &cfg.teacher, &sample.cubes, visible, &[], false)?;
        let pred = decoder_forward(&mut g, &p, TEACHER_DECODER, &cfg.teacher_decoder, out.normed, visible, &sample.mask.grid)?;
        let mask = MaskPair {
            student: visible.clone(),
            diff: Vec::new(),
            ..sample.mask.clone()
        };
        recon.push(recon_loss(&mut g, pred, &sample.targets, &mask)?);
    }
    let s = sum_scalars(&mut g, &recon)?;
    let l = g.scale(s, 1.0 / batch.len() as f64)?;
    let l_recon = g.value(l).item();
    let grads = g.backward(l)?;
    Ok((
        LossBreakdown {
            l_recon,
            l_dir: 0.0,
            l_gen: 0.0,
            l_total: l_recon,
        },
        p.collect(&grads),
    ))
}

/// Direct-alignment error per layer pair for one sample, without building gradients.
pub fn direct_errors(
    cfg: &ModelConfig,
    plan: &AlignmentPlan,
    student: &ParamSet,
    teacher: &ParamSet,
    sample: &Sample,
) -> Result<Vec<f64>> {
    let taps = teacher_features(cfg, &plan.teacher_layers(), teacher, sample)?;
    let mut g = Graph::new();
    let p = Bound::new(&mut g, student, false);
    let out = encode_visible(
        &mut g,
        &p,
        STUDENT,
        &cfg.student,
        &sample.cubes,
        &sample.mask.student,
        &plan.student_layers(),
        cfg.tap_after_final_norm,
    )?;
    let tea: BTreeMap<usize, Var> = taps.into_iter().map(|(l, t)| (l, g.constant(t))).collect();
    let terms = direct_align_terms(&mut g, &p, plan, &out.taps, &tea, &sample.mask)?;
    Ok(terms.iter().map(|&t| g.value(t).item()).collect())
}
