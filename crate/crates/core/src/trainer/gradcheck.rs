//! Analytic gradients of one loss term against central finite differences.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::Serialize;

use crate::config::RunConfig;
use crate::distill::{batch_teacher_features, build_objective, teacher_encoder, Term};
use crate::error::{Error, Result};
use crate::numcore::{finite_difference_at, relative_error};
use crate::rng::{Domain, RngKey};

use super::distill_sample;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub term: Term,
    /// Coordinates probed per tensor; ignored when `full` is set.
    pub probes_per_tensor: usize,
    pub full: bool,
    /// Upper bound on the total number of probed coordinates.
    pub max_coords: usize,
    pub batch: usize,
    pub h: f64,
    /// Denominator floor of the relative error, so gradients near zero are judged absolutely.
    /// Raised automatically to the resolution limit of the difference quotient, see [`resolution_floor`].
    pub floor: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            term: Term::Total,
            probes_per_tensor: 16,
            full: false,
            max_coords: 20_000,
            batch: 2,
            h: 1e-5,
            floor: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel: f64,
    pub worst_tensor: String,
    pub coords: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub term: Term,
    /// The term is identically zero for this config (nothing to check).
    pub empty: bool,
    pub probed: usize,
    /// Denominator floor actually used.
    pub floor: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }

    pub fn max_rel(&self) -> f64 {
        self.worst().map_or(0.0, |g| g.max_rel)
    }

    pub fn passed(&self) -> bool {
        self.max_rel() <= self.tolerance
    }
}

/// Round-off in `f(θ ± h)` is a few ulps of `|f|`, so a central difference
/// cannot resolve gradients much below `ε·|f|/h`. Coordinates under that level
/// are compared against it instead of their own magnitude.
pub fn resolution_floor(loss: f64, h: f64, tolerance: f64) -> f64 {
    const ULPS: f64 = 2.0;
    ULPS * f64::EPSILON * loss.abs() / h / tolerance
}

/// Module a tensor belongs to: its name without the leaf, keeping block indices.
fn group_of(name: &str) -> String {
    match name.rsplit_once('.') {
        Some((head, _)) => {
            let parts: Vec<&str> = head.split('.').collect();
            match parts.iter().position(|p| *p == "blocks") {
                Some(i) if i + 1 < parts.len() => parts[..=i + 1].join("."),
                _ => head.to_string(),
            }
        }
        None => name.to_string(),
    }
}

/// Check the gradient of `opts.term` for every student-side tensor of `cfg`.
///
/// Uses a freshly initialized teacher and the first training batch. Probed
/// coordinates are drawn per tensor from a seeded stream.
pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let model = &cfg.model;
    let plan = model.plan()?;
    let grid = cfg.grid()?;
    let t = &cfg.train;
    let student = model.init_student(cfg.cube_len(), t.seed)?;
    let teacher = teacher_encoder(&model.init_teacher(cfg.cube_len(), t.seed));

    let mut coords: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (name, theta)) in student.iter().enumerate() {
        let n = theta.numel();
        let picked = if opts.full || opts.probes_per_tensor >= n {
            (0..n).collect()
        } else {
            let mut rng = RngKey::new(t.seed, 0, i as u64).stream(Domain::Probe);
            let mut v = index::sample(&mut rng, n, opts.probes_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        coords.insert(name, picked);
    }
    let probed: usize = coords.values().map(Vec::len).sum();
    if probed > opts.max_coords {
        return Err(Error::Config(vec![format!(
            "gradcheck would probe {probed} coordinates, above the cap of {}",
            opts.max_coords
        )]));
    }

    let batch = (0..opts.batch.max(1) as u64)
        .map(|i| distill_sample(cfg.clip, &grid, t.r_stu, t.r_tea, RngKey::new(t.seed, 0, i)))
        .collect::<Result<Vec<_>>>()?;
    let empty = match opts.term {
        Term::Dir => plan.pairs.iter().all(|p| p.direct.is_none()),
        Term::Gen => plan.pairs.iter().all(|p| p.generation.is_none()) || batch.iter().all(|s| s.mask.diff.is_empty()),
        Term::Recon | Term::Total => false,
    };
    if empty {
        return Ok(GradcheckReport {
            term: opts.term,
            empty: true,
            probed: 0,
            floor: opts.floor,
            tolerance: opts.tolerance,
            groups: Vec::new(),
        });
    }

    let taps = batch_teacher_features(model, &plan, &teacher, &batch)?;
    let objective = build_objective(model, &plan, &student, &batch, &taps)?;
    let loss = objective.graph.value(objective.terms.get(opts.term)).item();
    let floor = opts.floor.max(resolution_floor(loss, opts.h, opts.tolerance));
    let analytic = objective.gradients(opts.term)?;
    let mut groups: BTreeMap<String, GroupError> = BTreeMap::new();
    for (name, picked) in &coords {
        let theta = student.get(name)?;
        let mut failure = None;
        let mut f = |x: &crate::Tensor| {
            let mut s = student.clone();
            s.set(name, x.clone()).expect("same shape");
            match build_objective(model, &plan, &s, &batch, &taps) {
                Ok(o) => o.graph.value(o.terms.get(opts.term)).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let numeric = finite_difference_at(&mut f, theta, opts.h, picked);
        if let Some(e) = failure {
            return Err(e);
        }
        let numeric = numeric?;
        let grad = analytic.get(name)?;
        let worst = picked
            .iter()
            .zip(&numeric)
            .map(|(&c, &n)| relative_error(grad.data()[c], n, floor))
            .fold(0.0, f64::max);
        let entry = groups.entry(group_of(name)).or_insert_with(|| GroupError {
            group: group_of(name),
            max_rel: 0.0,
            worst_tensor: name.to_string(),
            coords: 0,
        });
        entry.coords += picked.len();
        if worst > entry.max_rel {
            entry.max_rel = worst;
            entry.worst_tensor = name.to_string();
        }
    }
    Ok(GradcheckReport {
        term: opts.term,
        empty: false,
        probed,
        floor,
        tolerance: opts.tolerance,
        groups: groups.into_values().collect(),
    })
}
