//! Optimiser, schedule, early stopping and the epoch loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{prepare_batch, AugmentedTrainSet, LabeledImage};
use crate::error::{Error, Result};
use crate::label::{Label, Prediction};
use crate::loss::{FocalLossConfig, LossKind};
use crate::metrics::{confusion, metrics, roc_auc, EvalReport};
use crate::model::{BlockMode, PinSiteNet};
use crate::nn::{activation, activation_backward, ActivationKind, BackwardCtx, Mode, Module};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub lr0: f64,
    /// Epochs per factor of `decay_rate`.
    pub decay_period: f64,
    pub decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    pub block_mode: BlockMode,
    /// Decision threshold on `p_groupB` for validation metrics.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 300,
            patience: 70,
            min_delta: 1e-4,
            lr0: 1e-3,
            decay_period: 30.0,
            decay_rate: 0.95,
            beta1: 0.92,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossKind::Focal(FocalLossConfig::default()),
            block_mode: BlockMode::Errc,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("min_delta", self.min_delta),
            ("lr0", self.lr0),
            ("decay_period", self.decay_period),
            ("decay_rate", self.decay_rate),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for batch norm"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::config(format!(
                "patience ({}) must be below max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if let LossKind::Focal(f) = self.loss {
            f.validate()?;
        }
        Ok(())
    }
}

/// Continuous exponential decay: `lr0 · rate^(epoch / period)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_rate.powf(epoch as f64 / cfg.decay_period)
}

/// One bias-corrected Adam update of every parameter (`t` counts from 1),
/// then clears the gradients. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<T: Scalar, M: Module<T> + ?Sized>(module: &mut M, lr: f64, cfg: &TrainConfig, t: u64) -> Result<()> {
    let mut bad = None;
    module.visit_params(&mut |p| {
        if bad.is_none() && !p.grad.is_finite() {
            bad = Some(p.name.clone());
        }
    });
    if let Some(name) = bad {
        return Err(Error::Numeric(format!("non-finite gradient in parameter {name}")));
    }
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    module.visit_params_mut(&mut |p| {
        let w = p.value.data_mut().iter_mut();
        let m = p.adam_m.data_mut().iter_mut();
        let v = p.adam_v.data_mut().iter_mut();
        for (((w, m), v), g) in w.zip(m).zip(v).zip(p.grad.data()) {
            let g = g.as_f64();
            let mn = b1 * m.as_f64() + (1.0 - b1) * g;
            let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::from_f64(mn);
            *v = T::from_f64(vn);
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *w = T::from_f64(w.as_f64() - step);
        }
        p.zero_grad();
    });
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

/// Tracks the best validation loss and the run of epochs without a
/// meaningful improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    /// Strictly below every earlier loss: snapshot this epoch.
    pub new_best: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Stops once more than `patience` consecutive epochs failed to beat the
    /// best loss by more than `min_delta`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best - self.min_delta {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let new_best = val_loss < self.best;
        if new_best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
        }
        StopDecision {
            new_best,
            stop: self.stale > self.patience,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// NaN when the validation set holds a single class.
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRow {
        &self.rows[self.best_epoch]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss,precision,recall,f1,auc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.lr, r.train_loss, r.val_loss, r.precision, r.recall, r.f1, r.auc
            );
        }
        out
    }
}

/// Loss, probabilities and metrics of a network over a labelled set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub predictions: Vec<Prediction>,
    pub report: EvalReport,
}

pub fn evaluate(
    net: &mut PinSiteNet<f32>,
    items: &[LabeledImage],
    loss: &LossKind,
    threshold: f64,
    batch_size: usize,
) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty set".into()));
    }
    let previous = net.mode();
    net.set_mode(Mode::Infer);
    let size = net.config().input_size;
    let mut predictions = Vec::with_capacity(items.len());
    let mut total = 0.0;
    for chunk in items.chunks(batch_size.max(1)) {
        let x = prepare_batch(chunk.iter().map(|i| &i.image), size)?;
        let probs = net.probabilities(x)?;
        let labels: Vec<Label> = chunk.iter().map(|i| i.label).collect();
        total += loss.evaluate(&probs, &labels)?.0 * chunk.len() as f64;
        for row in probs.data().chunks_exact(2) {
            predictions.push(Prediction::from_probs([row[0] as f64, row[1] as f64], threshold)?);
        }
    }
    net.set_mode(previous);
    let truths: Vec<Label> = items.iter().map(|i| i.label).collect();
    let cm = confusion(&predictions, &truths)?;
    let scores: Vec<f64> = predictions.iter().map(|p| p.probs[0]).collect();
    let auc = roc_auc(&scores, &truths).ok().map(|c| c.auc);
    Ok(Evaluation {
        loss: total / items.len() as f64,
        predictions,
        report: EvalReport {
            confusion: cm,
            metrics: metrics(&cm),
            auc,
        },
    })
}

/// Batch index ranges for one epoch. A trailing batch of one sample is
/// folded into its predecessor because batch norm needs two.
pub fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains `net` and returns it holding the weights of the epoch with the
/// lowest validation loss. `on_epoch` sees every row as it is produced.
pub fn train_loop(
    mut net: PinSiteNet<f32>,
    train: &AugmentedTrainSet,
    val: &[LabeledImage],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRow),
) -> Result<(PinSiteNet<f32>, TrainReport)> {
    cfg.validate()?;
    if net.config().block_mode != cfg.block_mode {
        return Err(Error::config(format!(
            "network built with blocks={} but training config asks for {}",
            net.config().block_mode,
            cfg.block_mode
        )));
    }
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Dataset("training needs at least two training and one validation image".into()));
    }
    let size = net.config().input_size;
    net.reseed_dropout(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best_state = net.named_tensors();
    let mut rows = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        net.set_mode(Mode::Train);
        let mut train_total = 0.0;
        for (b, range) in batch_ranges(order.len(), cfg.batch_size).into_iter().enumerate() {
            let items: Vec<&LabeledImage> = order[range].iter().map(|&i| &train.images()[i]).collect();
            let x = prepare_batch(items.iter().map(|i| &i.image), size)?;
            let labels: Vec<Label> = items.iter().map(|i| i.label).collect();
            let logits = net.forward_logits(x)?;
            let probs = activation(ActivationKind::Softmax, &logits)?;
            let (loss, dprobs) = cfg.loss.evaluate(&probs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            train_total += loss * labels.len() as f64;
            let dlogits = activation_backward(ActivationKind::Softmax, &logits, &probs, &dprobs, false)?;
            net.backward_logits(dlogits, BackwardCtx { guided: false, skip_input_grad: true })?;
            step += 1;
            adam_step(&mut net, lr, cfg, step).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} (epoch {epoch}, batch {b})")),
                other => other,
            })?;
        }

        let eval = evaluate(&mut net, val, &cfg.loss, cfg.threshold, cfg.batch_size)?;
        let m = eval.report.metrics;
        let row = EpochRow {
            epoch,
            lr,
            train_loss: train_total / train.len() as f64,
            val_loss: eval.loss,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc: eval.report.auc.unwrap_or(f64::NAN),
        };
        on_epoch(&row);
        rows.push(row);
        let decision = stopper.observe(epoch, eval.loss);
        if decision.new_best {
            best_state = net.named_tensors();
        }
        if decision.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let mut saved = best_state.into_iter();
    net.named_tensors_mut(&mut |_, t| *t = saved.next().expect("same layout").1);
    net.set_mode(Mode::Infer);
    let best_epoch = stopper.best_epoch().ok_or_else(|| Error::Numeric("validation loss was never finite".into()))?;
    Ok((
        net,
        TrainReport {
            rows,
            best_epoch,
            stop_reason,
        },
    ))
}
