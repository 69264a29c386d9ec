use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamSet;
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Moments {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Moments {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One decoupled-weight-decay Adam update. `t` is the 1-based update count.
///
/// Every gradient is checked before anything is written, so a rejected step
/// leaves parameters and moments untouched.
pub fn adamw_step(params: &mut ParamSet, grads: &ParamSet, moments: &mut Moments, lr: f64, opt: &AdamW, t: u64) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::Diverged {
                what: format!("gradient of `{name}`"),
                step: t - 1,
            });
        }
    }
    let (b1, b2) = opt.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let decay = 1.0 - lr * opt.weight_decay;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let grad = grads.get(&name)?;
        let theta = params.get(&name)?;
        let m = moments.m.get(&name)?;
        let v = moments.v.get(&name)?;
        if grad.shape() != theta.shape() {
            return Err(Error::shape("adamw", grad.shape(), theta.shape()));
        }
        let n = theta.numel();
        let (mut new_theta, mut new_m, mut new_v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * g;
            let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
            let update = (mi / c1) / ((vi / c2).sqrt() + opt.eps);
            new_theta.push(theta.data()[i] * decay - lr * update);
            new_m.push(mi);
            new_v.push(vi);
        }
        let shape = theta.shape().to_vec();
        params.set(&name, Tensor::new(shape.clone(), new_theta)?)?;
        moments.m.set(&name, Tensor::new(shape.clone(), new_m)?)?;
        moments.v.set(&name, Tensor::new(shape, new_v)?)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
