//! Two-class losses over softmax rows. `p` is always the Group-B
//! probability and `y = 1` marks a Group-B sample.

use crate::error::{Error, Result};
use crate::label::Label;
use crate::tensor::{Scalar, Tensor};

pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalLossConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self { alpha: 0.15, gamma: 2.0 }
    }
}

impl FocalLossConfig {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        let cfg = Self { alpha, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("focal alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config(format!("focal gamma {} must be ≥ 0", self.gamma)));
        }
        Ok(())
    }
}

/// Loss selector for training runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Focal(FocalLossConfig),
    CrossEntropy,
}

impl LossKind {
    pub fn evaluate<T: Scalar>(&self, probs: &Tensor<T>, labels: &[Label]) -> Result<(f64, Tensor<T>)> {
        match self {
            LossKind::Focal(cfg) => focal_loss(probs, labels, cfg),
            LossKind::CrossEntropy => cross_entropy(probs, labels),
        }
    }
}

fn clamped_ln(v: f64) -> (f64, f64) {
    // Value and derivative of ln(max(v, ε)).
    if v > LOG_CLAMP {
        (v.ln(), 1.0 / v)
    } else {
        (LOG_CLAMP.ln(), 0.0)
    }
}

/// Derivative of `base^γ · l` w.r.t. `base`, treating `l` as constant; zero
/// whenever γ or `l` vanish so `0 · ∞` never appears.
fn pow_term_slope(base: f64, gamma: f64, l: f64) -> f64 {
    if gamma == 0.0 || l == 0.0 {
        0.0
    } else {
        gamma * base.powf(gamma - 1.0) * l
    }
}

/// Per-sample focal loss and its derivative w.r.t. `p`.
pub fn focal_point(p: f64, group_b: bool, cfg: &FocalLossConfig) -> (f64, f64) {
    let FocalLossConfig { alpha, gamma } = *cfg;
    if group_b {
        let (l, dl) = clamped_ln(p);
        let w = (1.0 - p).powf(gamma);
        let loss = -alpha * w * l;
        let grad = -alpha * (w * dl - pow_term_slope(1.0 - p, gamma, l));
        (loss, grad)
    } else {
        let (l, dl) = clamped_ln(1.0 - p);
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * l;
        let grad = -(1.0 - alpha) * (pow_term_slope(p, gamma, l) - w * dl);
        (loss, grad)
    }
}

pub fn cross_entropy_point(p: f64, group_b: bool) -> (f64, f64) {
    if group_b {
        let (l, dl) = clamped_ln(p);
        (-l, -dl)
    } else {
        let (l, dl) = clamped_ln(1.0 - p);
        (-l, dl)
    }
}

fn reduce_rows<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[Label],
    point: impl Fn(f64, bool) -> (f64, f64),
) -> Result<(f64, Tensor<T>)> {
    let dims = probs.dims();
    if dims.len() != 2 || dims[1] != 2 {
        return Err(Error::shape(format!("loss expects N×2 probabilities, got {dims:?}")));
    }
    if dims[0] != labels.len() {
        return Err(Error::shape(format!("{} rows but {} labels", dims[0], labels.len())));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros_like(probs);
    for (i, label) in labels.iter().enumerate() {
        let p = probs.data()[2 * i + 1].as_f64();
        let (l, g) = point(p, label.is_group_b());
        total += l;
        grad.data_mut()[2 * i + 1] = T::from_f64(g / n);
    }
    Ok((total / n, grad))
}

/// Batch-mean focal loss and its gradient w.r.t. the probability rows.
/// Only the Group-B column carries gradient.
pub fn focal_loss<T: Scalar>(probs: &Tensor<T>, labels: &[Label], cfg: &FocalLossConfig) -> Result<(f64, Tensor<T>)> {
    reduce_rows(probs, labels, |p, b| focal_point(p, b, cfg))
}

pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[Label]) -> Result<(f64, Tensor<T>)> {
    reduce_rows(probs, labels, cross_entropy_point)
}
