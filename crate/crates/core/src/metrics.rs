//! Intent-classification and slot-labeling metrics.

use crate::bio::extract_spans;
use crate::error::{Error, Result};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcMetrics {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// Accuracy plus micro/macro F1 over single-label intent predictions.
pub fn ic_metrics(pred: &[usize], gold: &[usize]) -> Result<IcMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::Data(format!(
            "ic_metrics: {} predictions vs {} golds",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data("ic_metrics: empty input".into()));
    }
    let classes: BTreeSet<usize> = pred.iter().chain(gold.iter()).copied().collect();
    let correct = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    let accuracy = correct as f64 / gold.len() as f64;

    let mut micro_tp = 0usize;
    let mut micro_fp = 0usize;
    let mut micro_fn = 0usize;
    let mut macro_sum = 0.0;
    for &c in &classes {
        let tp = pred
            .iter()
            .zip(gold)
            .filter(|(p, g)| **p == c && **g == c)
            .count();
        let fp = pred
            .iter()
            .zip(gold)
            .filter(|(p, g)| **p == c && **g != c)
            .count();
        let fal_n = pred
            .iter()
            .zip(gold)
            .filter(|(p, g)| **p != c && **g == c)
            .count();
        micro_tp += tp;
        micro_fp += fp;
        micro_fn += fal_n;
        let denom = 2 * tp + fp + fal_n;
        macro_sum += if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
    }
    let micro_f1 = 2.0 * micro_tp as f64 / (2 * micro_tp + micro_fp + micro_fn) as f64;
    Ok(IcMetrics {
        accuracy,
        micro_f1,
        macro_f1: macro_sum / classes.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub n_pred: usize,
    pub n_gold: usize,
}

/// Exact-span F1 over BIO tag sequences: a predicted span counts iff its
/// type, start, and end all match a gold span. Both-empty corpora score 1.
pub fn sl_span_f1(pred_seqs: &[Vec<String>], gold_seqs: &[Vec<String>]) -> Result<SpanF1> {
    if pred_seqs.len() != gold_seqs.len() {
        return Err(Error::Data(format!(
            "sl_span_f1: {} predicted sequences vs {} gold",
            pred_seqs.len(),
            gold_seqs.len()
        )));
    }
    let mut tp = 0usize;
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    for (p, g) in pred_seqs.iter().zip(gold_seqs) {
        if p.len() != g.len() {
            return Err(Error::Data(format!(
                "sl_span_f1: tag length mismatch {} vs {}",
                p.len(),
                g.len()
            )));
        }
        let ps: BTreeSet<_> = extract_spans(p)?.into_iter().collect();
        let gs: BTreeSet<_> = extract_spans(g)?.into_iter().collect();
        tp += ps.intersection(&gs).count();
        n_pred += ps.len();
        n_gold += gs.len();
    }
    let precision = if n_pred == 0 {
        1.0
    } else {
        tp as f64 / n_pred as f64
    };
    let recall = if n_gold == 0 {
        1.0
    } else {
        tp as f64 / n_gold as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SpanF1 {
        precision,
        recall,
        f1,
        true_positives: tp,
        n_pred,
        n_gold,
    })
}

/// Relative difference in percent against a positive baseline; positive
/// values are improvements.
pub fn relative_diff(score: f64, baseline: f64) -> Result<f64> {
    if baseline <= 0.0 {
        return Err(Error::Data(format!(
            "relative_diff: baseline {baseline} must be > 0"
        )));
    }
    Ok((score - baseline) / baseline * 100.0)
}
