//! Learning-rate schedule and the AdamW optimizer.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::config::{OptimConfig, Schedule};
use crate::error::{FlavaError, Result};
use crate::params::{ParamSpec, ParamStore};

pub const LOGIT_SCALE: &str = "heads.logit_scale";

/// Learning rate for update `step` in `[0, total_updates]`: a linear ramp
/// from 0 to the peak over the warmup, then cosine decay to 0.
pub fn lr_at(step: u64, o: &OptimConfig) -> Result<f64> {
    if step > o.total_updates {
        return Err(FlavaError::StepOutOfRange {
            step,
            total: o.total_updates,
        });
    }
    match o.schedule {
        Schedule::WarmupCosine => {
            let w = o.warmup_updates;
            if step < w {
                return Ok(o.learning_rate * step as f64 / w as f64);
            }
            let span = o.total_updates - w;
            if span == 0 {
                return Ok(if step == o.total_updates && w == 0 { 0.0 } else { o.learning_rate });
            }
            let progress = (step - w) as f64 / span as f64;
            Ok(o.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
        }
    }
}

/// AdamW with decoupled weight decay and per-parameter step counts.
///
/// A parameter without a gradient in some step is left untouched and its
/// moments are not advanced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
    pub steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
        o: &OptimConfig,
    ) -> UpdateStats {
        let grad_norm = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let scale = match o.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let t = *t as i32;
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            if ParamSpec::decays(name) {
                let keep = 1.0 - lr * o.weight_decay;
                p.mapv_inplace(|x| x * keep);
            }
            let (b1, b2) = (o.beta1, o.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + o.eps);
            });
        }
        UpdateStats {
            grad_norm,
            clipped: scale < 1.0,
        }
    }
}

/// Keeps the learned temperature at or above `min_temperature`.
pub fn clamp_logit_scale(params: &mut ParamStore, min_temperature: f64) {
    if let Some(ls) = params.get_mut(LOGIT_SCALE) {
        let max = (1.0 / min_temperature).ln();
        ls.mapv_inplace(|x| x.min(max));
    }
}
