//! AdamW with decoupled weight decay, and the learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;
pub const WARMUP_FRACTION: f64 = 0.3;
pub const START_DIV: f64 = 25.0;
pub const FINAL_DIV: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    OneCycle,
    Constant,
}

/// Cosine warmup from `lr_max / 25` to `lr_max` over the first 30% of steps,
/// then cosine annealing to `lr_max / 1e4`.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    let start = lr_max / START_DIV;
    let end = lr_max / FINAL_DIV;
    if total_steps == 0 {
        return start;
    }
    let s = step.min(total_steps) as f64;
    let warm = WARMUP_FRACTION * total_steps as f64;
    if s < warm {
        let frac = s / warm;
        start + (lr_max - start) * (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0
    } else {
        let span = total_steps as f64 - warm;
        let frac = if span > 0.0 { (s - warm) / span } else { 1.0 };
        lr_max - (lr_max - end) * (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0
    }
}

pub fn scheduled_lr(schedule: LrSchedule, step: usize, total_steps: usize, lr_max: f64) -> f64 {
    match schedule {
        LrSchedule::OneCycle => one_cycle_lr(step, total_steps, lr_max),
        LrSchedule::Constant => lr_max,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: [0.9, 0.999],
            weight_decay: 1e-4,
            eps: ADAM_EPS,
        }
    }
}

/// One AdamW update of a flat parameter block; `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, cfg: &AdamWConfig, t: u64) {
    assert!(t >= 1, "adam steps are 1-based");
    assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        param[i] -= lr * cfg.weight_decay * param[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |_: ()| -> BTreeMap<String, Tensor> {
            params.iter().map(|(n, p)| (n.clone(), Tensor::zeros(p.shape()))).collect()
        };
        Self {
            m: zeros(()),
            v: zeros(()),
            t: 0,
        }
    }

    /// Updates every parameter; parameters absent from `grads` see a zero
    /// gradient (their weights still decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: &AdamWConfig) -> Result<()> {
        self.t += 1;
        for (name, p) in params.iter_mut() {
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::invalid(format!("optimizer has no moments for {name}"))),
            };
            let zero;
            let g = match grads.get(name) {
                Some(g) if g.shape() == p.shape() => g.data(),
                Some(g) => return Err(Error::shape("adamw gradient", p.shape(), g.shape())),
                None => {
                    zero = vec![0.0; p.numel()];
                    &zero
                }
            };
            adamw_step(p.data_mut(), g, m.data_mut(), v.data_mut(), lr, cfg, self.t);
        }
        Ok(())
    }
}
