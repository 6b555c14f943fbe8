//! Confusion matrices, per-class scores and best-run selection.

use std::cmp::Ordering;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::augment::PreparedSample;
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::nn::layers::argmax_rows;
use crate::nn::{Mode, Network};
use crate::train::{assemble_batch, RunHistory};

/// Counts indexed `[truth][prediction]`, class 0 = norm, class 1 = pneumonia.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 2]; 2]) -> Self {
        Self { counts }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    /// Same matrix under the opposite class-index convention.
    pub fn swapped(&self) -> Self {
        let c = self.counts;
        Self {
            counts: [[c[1][1], c[1][0]], [c[0][1], c[0][0]]],
        }
    }
}

pub fn confusion_matrix(preds: &[usize], truth: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truth.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truth) {
        if p > 1 || t > 1 {
            return Err(Error::Validation(format!(
                "labels must be 0 or 1 (prediction {p}, truth {t})"
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when the class was never predicted (precision denominator 0).
    pub precision_degenerate: bool,
    /// Set when the class never occurs (recall denominator 0).
    pub recall_degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub per_class: [ClassScores; 2],
}

impl ClassMetrics {
    pub fn class(&self, label: Label) -> &ClassScores {
        &self.per_class[label.index()]
    }

    pub fn is_degenerate(&self) -> bool {
        self.per_class
            .iter()
            .any(|c| c.precision_degenerate || c.recall_degenerate)
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Validation("confusion matrix is empty".into()));
    }
    let scores = |c: usize| {
        let column = cm.counts[0][c] + cm.counts[1][c];
        let row = cm.counts[c][0] + cm.counts[c][1];
        let (precision, precision_degenerate) = ratio(cm.counts[c][c], column);
        let (recall, recall_degenerate) = ratio(cm.counts[c][c], row);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassScores {
            precision,
            recall,
            f1,
            precision_degenerate,
            recall_degenerate,
        }
    };
    Ok(ClassMetrics {
        accuracy: cm.trace() as f64 / total as f64,
        per_class: [scores(0), scores(1)],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: ClassMetrics,
    /// Samples whose two logits were exactly equal (predicted class 0).
    pub argmax_ties: usize,
}

/// Class predictions in sample order, evaluated in inference mode.
pub fn predict(model: &dyn Network, samples: &[PreparedSample], batch_size: usize) -> Result<(Vec<usize>, usize)> {
    model.check_consistency()?;
    let dtype = model.store().dtype();
    let mut preds = Vec::with_capacity(samples.len());
    let mut ties = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let (x, _) = assemble_batch(&refs, model.input_channels(), dtype)?;
        let logits = model.forward(&x, &mut Mode::Eval)?;
        let (p, t) = argmax_rows(&logits)?;
        preds.extend(p);
        ties += t;
    }
    Ok((preds, ties))
}

pub fn evaluate_model(model: &dyn Network, samples: &[PreparedSample], batch_size: usize) -> Result<Evaluation> {
    let (preds, ties) = predict(model, samples, batch_size)?;
    if ties > 0 {
        log::warn!("{}: {ties} argmax tie(s) resolved to class 0", model.describe());
    }
    let truth: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    let confusion = confusion_matrix(&preds, &truth)?;
    Ok(Evaluation {
        confusion,
        metrics: per_class_metrics(&confusion)?,
        argmax_ties: ties,
    })
}

/// Logits for a batch without gradient tracking of the inputs.
pub fn logits(model: &dyn Network, samples: &[PreparedSample]) -> Result<Tensor> {
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let (x, _) = assemble_batch(&refs, model.input_channels(), model.store().dtype())?;
    model.forward(&x, &mut Mode::Eval)
}

/// Order used to pick the best run: higher best validation accuracy, then
/// fewer hidden neurons, then earlier epoch. Runs without epochs rank last.
pub fn compare_runs(a: &RunHistory, b: &RunHistory) -> Ordering {
    match (&a.best, &b.best) {
        (None, None) => Ordering::Equal,
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (Some(x), Some(y)) => y
            .val_accuracy
            .total_cmp(&x.val_accuracy)
            .then_with(|| a.n_neurons.unwrap_or(0).cmp(&b.n_neurons.unwrap_or(0)))
            .then_with(|| x.epoch.cmp(&y.epoch)),
    }
}

pub fn select_best_run(histories: &[RunHistory]) -> Result<&RunHistory> {
    histories
        .iter()
        .min_by(|a, b| compare_runs(a, b))
        .ok_or_else(|| Error::Validation("no runs to choose from".into()))
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub backbone: String,
    pub n_neurons: Option<usize>,
    pub accuracy: f64,
    pub precision_0: f64,
    pub recall_0: f64,
    pub f1_0: f64,
    pub precision_1: f64,
    pub recall_1: f64,
    pub f1_1: f64,
}

impl MetricsRow {
    pub fn new(experiment: &str, backbone: &str, n_neurons: Option<usize>, m: &ClassMetrics) -> Self {
        let [c0, c1] = m.per_class;
        Self {
            experiment: experiment.to_string(),
            backbone: backbone.to_string(),
            n_neurons,
            accuracy: m.accuracy,
            precision_0: c0.precision,
            recall_0: c0.recall,
            f1_0: c0.f1,
            precision_1: c1.precision,
            recall_1: c1.recall,
            f1_1: c1.f1,
        }
    }
}
