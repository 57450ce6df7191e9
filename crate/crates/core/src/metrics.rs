//! Binary classification metrics: ROC AUC, log loss and F1.

use serde::{Deserialize, Serialize};

/// Probabilities are clamped into `[LOG_LOSS_CLAMP, 1 - LOG_LOSS_CLAMP]`.
pub const LOG_LOSS_CLAMP: f64 = 1e-7;

pub const F1_THRESHOLD: f64 = 0.5;

/// Area under the ROC curve as the Mann-Whitney statistic; tied scores earn
/// half credit. `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let average_rank = (i + j + 2) as f64 / 2.0;
        let tied_positives = order[i..=j].iter().filter(|&&idx| labels[idx]).count();
        rank_sum += average_rank * tied_positives as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Some(u / (p * negatives as f64))
}

pub fn log_loss(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    if scores.is_empty() {
        return 0.0;
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(LOG_LOSS_CLAMP, 1.0 - LOG_LOSS_CLAMP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / scores.len() as f64
}

/// F1 of the positive class at `threshold` (a score `>= threshold` predicts
/// positive). Zero when nothing is predicted positive.
pub fn f1(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 {
        log::warn!("f1: no positive predictions at threshold {threshold}");
        return 0.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_log_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when the evaluated labels contain a single class.
    pub auc: Option<f64>,
    pub log_loss: f64,
    pub f1: f64,
    pub samples: usize,
    /// Excluded from serialized reports so metric files hash-compare across runs.
    #[serde(skip)]
    pub wall_clock_secs: f64,
    pub history: Vec<EpochRecord>,
}

impl MetricsReport {
    pub fn from_scores(scores: &[f64], labels: &[bool]) -> Self {
        MetricsReport {
            auc: auc(scores, labels),
            log_loss: log_loss(scores, labels),
            f1: f1(scores, labels, F1_THRESHOLD),
            samples: scores.len(),
            wall_clock_secs: 0.0,
            history: Vec::new(),
        }
    }

    /// Long-format history rows: `(epoch, split, metric, value)`.
    pub fn history_rows(&self) -> Vec<(usize, &'static str, &'static str, String)> {
        let mut rows = Vec::with_capacity(self.history.len() * 3);
        for record in &self.history {
            rows.push((record.epoch, "train", "loss", format!("{}", record.train_loss)));
            rows.push((
                record.epoch,
                "val",
                "auc",
                record.val_auc.map_or_else(|| "nan".to_owned(), |v| format!("{v}")),
            ));
            rows.push((record.epoch, "val", "log_loss", format!("{}", record.val_log_loss)));
        }
        rows
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for (epoch, split, metric, value) in self.history_rows() {
            out.push_str(&format!("{epoch},{split},{metric},{value}\n"));
        }
        out
    }
}
