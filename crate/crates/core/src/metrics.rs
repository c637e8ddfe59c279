//! Evaluation metrics: MAE, accuracy, micro-F1 and filtered link-prediction
//! ranks.

use crate::error::{Error, Result};

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Contract(format!(
            "MAE over {} predictions and {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let total: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / predictions.len() as f64)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || predicted.is_empty() {
        return Err(Error::Contract(format!(
            "accuracy over {} predictions and {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Micro-averaged F1 over all (sample, label) decisions. Defined as 1 when
/// there are no positives in either predictions or truth.
pub fn micro_f1(predicted: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::Contract("micro-F1 needs matching non-empty inputs".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::Contract("micro-F1 rows differ in label count".into()));
        }
        for (&a, &b) in p.iter().zip(t) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Raw and filtered rank of `target`. Ties count half:
/// `rank = 1 + #greater + #equal / 2` over the competing candidates.
/// `is_known` marks other true answers, which the filtered rank ignores.
pub fn ranks(scores: &[f64], target: usize, is_known: impl Fn(usize) -> bool) -> (f64, f64) {
    let s = scores[target];
    let (mut raw_gt, mut raw_eq, mut f_gt, mut f_eq) = (0usize, 0usize, 0usize, 0usize);
    for (i, &v) in scores.iter().enumerate() {
        if i == target {
            continue;
        }
        let known = is_known(i);
        if v > s {
            raw_gt += 1;
            if !known {
                f_gt += 1;
            }
        } else if v == s {
            raw_eq += 1;
            if !known {
                f_eq += 1;
            }
        }
    }
    let rank = |gt: usize, eq: usize| 1.0 + gt as f64 + eq as f64 / 2.0;
    (rank(raw_gt, raw_eq), rank(f_gt, f_eq))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankMetrics {
    pub mrr: f64,
    pub mr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl RankMetrics {
    pub fn from_ranks(ranks: &[f64]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Contract("no ranks to summarize".into()));
        }
        let n = ranks.len() as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(RankMetrics {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            mr: ranks.iter().sum::<f64>() / n,
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
        })
    }

    pub fn named(&self) -> Vec<(&'static str, f64)> {
        vec![("mrr", self.mrr), ("mr", self.mr), ("hits1", self.hits1), ("hits3", self.hits3), ("hits10", self.hits10)]
    }

    /// `Hits@1 ≤ Hits@3 ≤ Hits@10 ≤ 1`, `MR ≥ 1`, `0 < MRR ≤ 1`.
    pub fn is_consistent(&self) -> bool {
        self.hits1 <= self.hits3
            && self.hits3 <= self.hits10
            && self.hits10 <= 1.0
            && self.mr >= 1.0
            && self.mrr > 0.0
            && self.mrr <= 1.0
    }
}
