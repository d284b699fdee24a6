//! Confusion-matrix statistics and ROC analysis. Group A is the positive
//! class throughout.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::label::{Label, Prediction};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }

    fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::GroupA, Label::GroupA) => self.tp += 1,
            (Label::GroupB, Label::GroupB) => self.tn += 1,
            (Label::GroupA, Label::GroupB) => self.fp += 1,
            (Label::GroupB, Label::GroupA) => self.fn_ += 1,
        }
    }
}

pub fn confusion(predictions: &[Prediction], truths: &[Label]) -> Result<ConfusionMatrix> {
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    confusion_from_labels(&labels, truths)
}

pub fn confusion_from_labels(predicted: &[Label], truths: &[Label]) -> Result<ConfusionMatrix> {
    if predicted.len() != truths.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} truths",
            predicted.len(),
            truths.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predicted.iter().zip(truths) {
        cm.record(p, t);
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any denominator was zero and the affected value defaulted to 0.
    pub degenerate: bool,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    let p = ratio(cm.tp, cm.tp + cm.fp);
    let r = ratio(cm.tp, cm.tp + cm.fn_);
    let precision = p.unwrap_or(0.0);
    let recall = r.unwrap_or(0.0);
    Metrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        degenerate: p.is_none() || r.is_none() || precision + recall == 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples scoring at or above this value are called positive.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

/// ROC by sweeping every distinct score from high to low, AUC by the
/// trapezoidal rule. Tied scores move the curve diagonally, which counts
/// tied positive/negative pairs as one half.
pub fn roc_auc(scores: &[f64], truths: &[Label]) -> Result<RocCurve> {
    if scores.len() != truths.len() {
        return Err(Error::Input(format!("{} scores but {} truths", scores.len(), truths.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    let pos = truths.iter().filter(|&&t| t == Label::GroupA).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Domain("ROC needs at least one sample of each class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            match truths[order[i]] {
                Label::GroupA => tp += 1,
                Label::GroupB => fp += 1,
            }
            i += 1;
        }
        // Trapezoid in count units, normalised at the end.
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    Ok(RocCurve {
        auc: auc / (pos as f64 * neg as f64),
        points,
    })
}

/// Everything one evaluation pass reports.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub auc: Option<f64>,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let cm = &self.confusion;
        let mut rows = vec![
            ("tp", cm.tp as f64),
            ("tn", cm.tn as f64),
            ("fp", cm.fp as f64),
            ("fn", cm.fn_ as f64),
            ("accuracy", cm.accuracy()),
            ("precision", self.metrics.precision),
            ("recall", self.metrics.recall),
            ("f1", self.metrics.f1),
        ];
        if let Some(auc) = self.auc {
            rows.push(("auc", auc));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>10}", "metric", "value");
        for (k, v) in self.rows() {
            if v.fract() == 0.0 && !matches!(k, "precision" | "recall" | "f1" | "auc" | "accuracy") {
                let _ = writeln!(out, "{k:<10} {v:>10}");
            } else {
                let _ = writeln!(out, "{k:<10} {v:>10.4}");
            }
        }
        if self.metrics.degenerate {
            out.push_str("(degenerate: a zero denominator was reported as 0)\n");
        }
        out
    }
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    out
}
