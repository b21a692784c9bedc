//! LARS and heavy-ball SGD, plus the warmup + cosine learning-rate schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LARS_MOMENTUM: f64 = 0.9;
pub const DEFAULT_TRUST_COEFFICIENT: f64 = 0.001;
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.05;
const TRUST_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_coefficient: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl ScheduleSpec {
    pub fn new(base_coefficient: f64, batch_size: usize, total_steps: usize) -> Self {
        Self {
            base_coefficient,
            batch_size,
            total_steps,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_coefficient >= 0.0 && self.base_coefficient.is_finite()) {
            return Err(Error::Config(format!(
                "learning-rate coefficient must be a non-negative number, got {}",
                self.base_coefficient
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    /// `base_coefficient * sqrt(batch_size)`.
    pub fn peak_lr(&self) -> f64 {
        self.base_coefficient * (self.batch_size as f64).sqrt()
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    /// Learning rate at (possibly fractional) step `t`, clamped to the run.
    pub fn lr_at(&self, t: f64) -> f64 {
        let peak = self.peak_lr();
        let warm = self.warmup_steps();
        let total = self.total_steps as f64;
        let t = t.clamp(0.0, total);
        if t < warm {
            return peak * t / warm;
        }
        if total <= warm {
            return peak;
        }
        let progress = (t - warm) / (total - warm);
        peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

pub fn schedule_lr(spec: &ScheduleSpec, step: usize) -> Result<f64> {
    if step > spec.total_steps {
        return Err(Error::Config(format!(
            "step {step} outside schedule of {} steps",
            spec.total_steps
        )));
    }
    Ok(spec.lr_at(step as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lars,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lars" => Ok(Self::Lars),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected lars or sgd)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
}

impl OptimizerConfig {
    pub fn lars(weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Lars,
            momentum: LARS_MOMENTUM,
            weight_decay,
            trust_coefficient: DEFAULT_TRUST_COEFFICIENT,
        }
    }

    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum,
            weight_decay,
            trust_coefficient: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) || !(self.trust_coefficient > 0.0) {
            return Err(Error::Config(
                "weight_decay must be >= 0 and trust_coefficient > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Momentum state for a named parameter set.
///
/// Names in `excluded` are neither trust-scaled nor decayed.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    excluded: BTreeSet<String>,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, excluded: BTreeSet<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            excluded,
            buffers: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn momentum_buffer(&self, name: &str) -> Option<&[f64]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        for (name, g) in grads {
            let w = params
                .get(name)
                .ok_or_else(|| Error::Structure(format!("gradient for unknown parameter `{name}`")))?;
            if w.shape() != g.shape() {
                return Err(Error::dim("optimizer_step", w.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric { param: name.clone() });
            }
        }
        for (name, g) in grads {
            let w = params.get_mut(name).expect("checked above");
            let excluded = self.excluded.contains(name);
            let wd = if excluded { 0.0 } else { self.cfg.weight_decay };
            let gp: Vec<f64> = g
                .data()
                .iter()
                .zip(w.data())
                .map(|(gi, wi)| f64::from(*gi) + wd * f64::from(*wi))
                .collect();
            let ratio = if excluded || self.cfg.kind == OptimizerKind::Sgd {
                1.0
            } else {
                let wn = w.norm();
                let gn = gp.iter().map(|v| v * v).sum::<f64>().sqrt();
                if wn > 0.0 && gn > 0.0 {
                    self.cfg.trust_coefficient * wn / (gn + TRUST_EPS)
                } else {
                    1.0
                }
            };
            let m = self.buffers.entry(name.clone()).or_insert_with(|| vec![0.0; gp.len()]);
            for ((mi, wi), gi) in m.iter_mut().zip(w.data_mut()).zip(&gp) {
                *mi = self.cfg.momentum * *mi + ratio * lr * gi;
                *wi = (f64::from(*wi) - *mi) as f32;
            }
        }
        Ok(())
    }
}
