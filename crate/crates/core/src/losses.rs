//! Overlap losses on probability maps: Tversky, soft Jaccard, and their
//! weighted combination. Each returns the loss value together with its exact
//! gradient with respect to the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskops::BinaryMask;
use crate::tensor::TensorF;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Smoothing term added to numerator and denominator.
    pub alpha: f64,
    /// Weight of false negatives in the Tversky denominator; false positives get `1 - beta`.
    pub beta: f64,
    /// Weight of the Tversky term.
    pub lambda1: f64,
    /// Weight of the Jaccard term.
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.6,
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Range(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Range(format!("beta must be in (0, 1), got {}", self.beta)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Range(format!(
                "loss weights must be >= 0, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// A loss value and its gradient, shaped like the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: TensorF,
}

fn check_inputs(pred: &[f64], target: &[u8]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} elements, target has {}",
            pred.len(),
            target.len()
        )));
    }
    if let Some(p) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Range(format!("prediction {p} outside [0, 1]")));
    }
    Ok(())
}

/// Tversky loss on flat slices. Inputs are assumed validated.
pub(crate) fn tversky_raw(pred: &[f64], target: &[u8], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let (mut inter, mut fneg, mut fpos) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let y = t as f64;
        inter += y * p;
        fneg += (1.0 - p) * y;
        fpos += p * (1.0 - y);
    }
    let num = cfg.alpha + inter;
    let den = cfg.alpha + inter + cfg.beta * fneg + (1.0 - cfg.beta) * fpos;
    // d(den)/dp_j = y - beta*y + (1-beta)(1-y) = 1 - beta for every j
    let dden = 1.0 - cfg.beta;
    let den2 = den * den;
    let grad = target
        .iter()
        .map(|&t| -((t as f64) * den - num * dden) / den2)
        .collect();
    (1.0 - num / den, grad)
}

/// Soft Jaccard loss on flat slices. Inputs are assumed validated.
pub(crate) fn jaccard_raw(pred: &[f64], target: &[u8], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let (mut inter, mut sum_y, mut sum_p) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let y = t as f64;
        inter += y * p;
        sum_y += y;
        sum_p += p;
    }
    let num = cfg.alpha + inter;
    let den = cfg.alpha + sum_y + sum_p - inter;
    let den2 = den * den;
    let grad = target
        .iter()
        .map(|&t| {
            let y = t as f64;
            -(y * den - num * (1.0 - y)) / den2
        })
        .collect();
    (1.0 - num / den, grad)
}

pub(crate) fn combined_raw(pred: &[f64], target: &[u8], cfg: &LossConfig) -> (f64, Vec<f64>) {
    let (tv, tg) = tversky_raw(pred, target, cfg);
    let (jv, jg) = jaccard_raw(pred, target, cfg);
    let grad = tg
        .iter()
        .zip(&jg)
        .map(|(a, b)| cfg.lambda1 * a + cfg.lambda2 * b)
        .collect();
    (cfg.lambda1 * tv + cfg.lambda2 * jv, grad)
}

fn wrap(
    pred: &TensorF,
    target: &BinaryMask,
    cfg: &LossConfig,
    f: fn(&[f64], &[u8], &LossConfig) -> (f64, Vec<f64>),
) -> Result<Loss> {
    check_inputs(pred.data(), target.bits())?;
    let (value, grad) = f(pred.data(), target.bits(), cfg);
    Ok(Loss {
        value,
        grad: TensorF::from_vec(pred.shape(), grad)?,
    })
}

/// `1 - (a + <y,p>) / (a + <y,p> + b<1-p,y> + (1-b)<p,1-y>)`.
pub fn tversky_loss(pred: &TensorF, target: &BinaryMask, cfg: &LossConfig) -> Result<Loss> {
    wrap(pred, target, cfg, tversky_raw)
}

/// `1 - (a + <y,p>) / (a + |y| + |p| - <y,p>)`.
pub fn jaccard_loss(pred: &TensorF, target: &BinaryMask, cfg: &LossConfig) -> Result<Loss> {
    wrap(pred, target, cfg, jaccard_raw)
}

/// `lambda1 * tversky + lambda2 * jaccard`.
pub fn combined_loss(pred: &TensorF, target: &BinaryMask, cfg: &LossConfig) -> Result<Loss> {
    wrap(pred, target, cfg, combined_raw)
}

/// Mean combined loss over a batch; each gradient is scaled by `1 / batch`.
pub fn combined_loss_batch(
    preds: &[TensorF],
    targets: &[BinaryMask],
    cfg: &LossConfig,
) -> Result<(f64, Vec<TensorF>)> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Dimension(format!(
            "batch of {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let scale = 1.0 / preds.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        let l = combined_loss(p, t, cfg)?;
        total += l.value;
        grads.push(l.grad.map(|g| g * scale));
    }
    Ok((total * scale, grads))
}
