//! Teacher/student coupling: EMA tracking, top-K targets and the masked
//! regression loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::MaskSet;
use crate::numerics::{smooth_l1_value, Graph, NumericsError, ParamStore, Tensor, Var, NORM_EPS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("empty mask: the masked objective is undefined")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_anneal_steps: u64,
}

impl Default for EmaConfig {
    /// Sized for the 2000-step desk schedule: a fast teacher while the
    /// targets are still random, slowing over the first half. Long runs want
    /// 0.999 → 0.9999.
    fn default() -> Self {
        EmaConfig { tau_start: 0.9, tau_end: 0.999, tau_anneal_steps: 1000 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(0.0 < self.tau_start && self.tau_start <= self.tau_end && self.tau_end < 1.0) {
            return Err(DistillError::Config(format!(
                "need 0 < tau_start ({}) <= tau_end ({}) < 1",
                self.tau_start, self.tau_end
            )));
        }
        Ok(())
    }
}

/// Linear from `tau_start` to `tau_end` over `tau_anneal_steps`, then flat.
pub fn tau_schedule(step: u64, cfg: &EmaConfig) -> f64 {
    if step >= cfg.tau_anneal_steps {
        return cfg.tau_end;
    }
    let frac = step as f64 / cfg.tau_anneal_steps as f64;
    cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub top_k: usize,
    pub normalize_targets: bool,
    pub loss_beta: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig { top_k: 8, normalize_targets: true, loss_beta: 1.0 }
    }
}

impl TargetConfig {
    pub fn validate(&self, layers: usize) -> Result<(), DistillError> {
        if self.top_k == 0 || self.top_k > layers {
            return Err(DistillError::Config(format!("top_k {} outside 1..={layers}", self.top_k)));
        }
        if !(self.loss_beta > 0.0) {
            return Err(DistillError::Config(format!("loss_beta {} must be positive", self.loss_beta)));
        }
        Ok(())
    }
}

/// Standardizes each column of a `T×H` matrix over time (eps 1e-5).
pub fn instance_norm_time(x: &Tensor<f32>) -> Result<Tensor<f32>, DistillError> {
    let (t, h) = x.dims2()?;
    let mut mean = vec![0.0f64; h];
    for row in x.data().chunks(h) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0f64; h];
    for row in x.data().chunks(h) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let rstd: Vec<f64> = var.iter().map(|s| 1.0 / (s / t as f64 + NORM_EPS).sqrt()).collect();
    let mut out = Vec::with_capacity(t * h);
    for row in x.data().chunks(h) {
        out.extend(row.iter().zip(&mean).zip(&rstd).map(|((&v, &m), &r)| ((v as f64 - m) * r) as f32));
    }
    Ok(Tensor::new(&[t, h], out)?)
}

/// Average of the last `top_k` layer outputs, each optionally instance
/// normalized over time first.
pub fn build_targets(layers: &[Tensor<f32>], cfg: &TargetConfig) -> Result<Tensor<f32>, DistillError> {
    cfg.validate(layers.len())?;
    let chosen = &layers[layers.len() - cfg.top_k..];
    let shape = chosen[0].shape().to_vec();
    let mut acc = vec![0.0f64; chosen[0].numel()];
    for l in chosen {
        if l.shape() != shape.as_slice() {
            return Err(DistillError::Shape(format!("layer outputs {:?} vs {:?}", l.shape(), shape)));
        }
        let l = if cfg.normalize_targets { instance_norm_time(l)? } else { l.clone() };
        for (a, &v) in acc.iter_mut().zip(l.data()) {
            *a += v as f64;
        }
    }
    let k = cfg.top_k as f64;
    Ok(Tensor::new(&shape, acc.iter().map(|a| (a / k) as f32).collect())?)
}

/// Mean smooth-L1 over masked rows only, on the tape.
pub fn distill_loss_graph(
    g: &mut Graph<f32>,
    prediction: Var,
    target: &Tensor<f32>,
    mask: &MaskSet,
    beta: f64,
) -> Result<Var, DistillError> {
    if mask.is_empty() {
        return Err(DistillError::EmptyMask);
    }
    Ok(g.smooth_l1(prediction, target, Some(mask.indices()), beta as f32)?)
}

/// Mean smooth-L1 over masked rows only, evaluated directly.
pub fn distill_loss(prediction: &Tensor<f32>, target: &Tensor<f32>, mask: &MaskSet, beta: f64) -> Result<f64, DistillError> {
    if mask.is_empty() {
        return Err(DistillError::EmptyMask);
    }
    if prediction.shape() != target.shape() {
        return Err(DistillError::Shape(format!("prediction {:?} vs target {:?}", prediction.shape(), target.shape())));
    }
    let (t, h) = prediction.dims2()?;
    let mut total = 0.0;
    for &r in mask.indices() {
        if r >= t {
            return Err(NumericsError::Index { index: r, len: t }.into());
        }
        for (&p, &q) in prediction.row(r).iter().zip(target.row(r)) {
            total += smooth_l1_value(p as f64 - q as f64, beta);
        }
    }
    Ok(total / (mask.count() * h) as f64)
}

/// `θ_t ← τ·θ_t + (1 − τ)·θ_s` for every tensor.
pub fn ema_update(teacher: &mut ParamStore<f32>, student: &ParamStore<f32>, tau: f64) -> Result<(), DistillError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(DistillError::Config(format!("tau {tau} outside (0, 1)")));
    }
    if !teacher.same_layout(student) {
        return Err(DistillError::Shape("teacher and student layouts differ".into()));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = (tau * *tv as f64 + (1.0 - tau) * sv as f64) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub step: u64,
}

impl DistillState {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: ParamStore<f32>) -> Self {
        DistillState { teacher: student.clone(), student, step: 0 }
    }

    pub fn ema_update(&mut self, tau: f64) -> Result<(), DistillError> {
        ema_update(&mut self.teacher, &self.student, tau)
    }
}
