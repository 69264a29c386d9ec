//! Randomized loss cases evaluated both through the graph and through the scalar oracle.

#![allow(dead_code)]

use std::collections::BTreeMap;

use amd_core::distill::{
    direct_align_loss, gen_align_loss, recon_loss, AlignmentConfig, AlignmentPlan, LossKind, Strategy,
};
use amd_core::masking::{sample_asymmetric_pair, MaskPair};
use amd_core::network::{Bound, FeatureTap, GeneratorConfig, Initializer, ParamSet};
use amd_core::rng::{Domain, RngKey};
use amd_core::tokenize::TokenGrid;
use amd_core::{Graph, Tensor};
use rand::Rng;

use super::oracle;

pub struct Case {
    pub plan: AlignmentPlan,
    pub generator: GeneratorConfig,
    pub params: ParamSet,
    pub student: BTreeMap<usize, Tensor>,
    pub teacher: BTreeMap<usize, Tensor>,
    pub mask: MaskPair,
    pub pred: Tensor,
    pub targets: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub recon: f64,
    pub dir: f64,
    pub gen: f64,
}

fn jitter(params: &ParamSet, init: &mut Initializer) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        let noise = init.uniform(t.shape(), 0.3);
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    out
}

/// A random valid configuration on a grid of at most 32 tokens.
pub fn random_case(seed: u64) -> Case {
    let key = RngKey::new(seed, 0, 0);
    let mut rng = key.stream(Domain::Probe);
    let grid = loop {
        let g = TokenGrid::new(rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
        if g.num_tubes() >= 2 && g.num_tokens() <= 32 {
            break g;
        }
    };
    let tubes = grid.num_tubes();
    let k_tea = rng.random_range(1..=tubes);
    let k_stu = rng.random_range(1..=k_tea);
    let ratio = |k: usize| 1.0 - k as f64 / tubes as f64;
    let mask = sample_asymmetric_pair(&grid, ratio(k_stu), ratio(k_tea), &mut rng).unwrap();

    let d_stu = 2 * rng.random_range(1..=3);
    let d_tea = 2 * rng.random_range(1..=4);
    let (l_stu, l_tea) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let strategy = [Strategy::DirectOnly, Strategy::GenerationOnly, Strategy::Parallel, Strategy::Serial]
        [rng.random_range(0..4)];
    let mut pairs = vec![(l_stu, l_tea)];
    if rng.random_bool(0.5) {
        pairs.insert(0, (rng.random_range(1..=l_stu), rng.random_range(1..=l_tea)));
    }
    let mut cfg = AlignmentConfig::new(strategy, pairs);
    if rng.random_bool(0.25) {
        cfg.loss_kind = LossKind::L1;
    }
    let plan = AlignmentPlan::new(&cfg).unwrap();
    let generator = GeneratorConfig {
        depth: rng.random_range(1..=2),
        heads: if d_tea % 4 == 0 { rng.random_range(1..=2) * 2 } else { rng.random_range(1..=2) },
        mlp_ratio: rng.random_range(1..=3),
    };

    let mut init = Initializer::from_key(RngKey::new(seed, 1, 0));
    let mut params = ParamSet::new();
    plan.init_params(&mut params, &mut init, d_stu, d_tea, &generator);
    let params = jitter(&params, &mut init);

    let mut student = BTreeMap::new();
    let mut teacher = BTreeMap::new();
    for p in &plan.pairs {
        student.insert(p.l_stu, init.uniform(&[mask.student.len(), d_stu], 1.5));
        teacher.insert(p.l_tea, init.uniform(&[mask.teacher.len(), d_tea], 1.5));
    }
    let cube = rng.random_range(1..=5);
    let pred = init.uniform(&[grid.num_tokens(), cube], 2.0);
    let targets = init.uniform(&[grid.num_tokens(), cube], 2.0);
    Case {
        plan,
        generator,
        params,
        student,
        teacher,
        mask,
        pred,
        targets,
    }
}

pub fn vectorized(case: &Case) -> Losses {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &case.params, true);
    let student = FeatureTap::new(case.student.iter().map(|(&l, t)| (l, g.constant(t.clone()))).collect());
    let teacher: BTreeMap<_, _> = case.teacher.iter().map(|(&l, t)| (l, g.constant(t.clone()))).collect();
    let pred = g.constant(case.pred.clone());
    let recon = recon_loss(&mut g, pred, &case.targets, &case.mask).unwrap();
    let dir = direct_align_loss(&mut g, &p, &case.plan, &student, &teacher, &case.mask).unwrap();
    let gen = gen_align_loss(&mut g, &p, &case.plan, &case.generator, &student, &teacher, &case.mask).unwrap();
    Losses {
        recon: g.value(recon).item(),
        dir: g.value(dir).item(),
        gen: g.value(gen.loss).item(),
    }
}

pub fn scalar(case: &Case) -> Losses {
    Losses {
        recon: oracle::recon(&case.pred, &case.targets, &case.mask),
        dir: oracle::direct(&case.params, &case.plan, &case.student, &case.teacher, &case.mask),
        gen: oracle::generation(&case.params, &case.plan, &case.generator, &case.student, &case.teacher, &case.mask),
    }
}

/// Largest absolute difference per term across `trials` random cases.
pub fn worst_differences(trials: u64, seed: u64) -> Losses {
    let mut worst = Losses {
        recon: 0.0,
        dir: 0.0,
        gen: 0.0,
    };
    for i in 0..trials {
        let case = random_case(seed.wrapping_add(i));
        let (a, b) = (vectorized(&case), scalar(&case));
        worst.recon = worst.recon.max((a.recon - b.recon).abs());
        worst.dir = worst.dir.max((a.dir - b.dir).abs());
        worst.gen = worst.gen.max((a.gen - b.gen).abs());
    }
    worst
}
