//! Multi-label evaluation: micro/macro F1, micro/macro AUC, precision at N.
//!
//! Conventions, fixed for reproducibility: predictions are `score >=
//! threshold`; F1 uses 0/0 -> 0; macro-F1 averages over the full label
//! space; AUC uses the rank-sum formulation with 0.5 per tie and is null
//! without both classes; P@N breaks score ties by lower label index.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Scores and gold labels for a document set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBatch {
    /// `scores[doc][label]` in `[0, 1]`.
    pub scores: Vec<Vec<f64>>,
    /// `gold[doc][label]` in `{0, 1}`.
    pub gold: Vec<Vec<f64>>,
    pub threshold: f64,
}

impl EvalBatch {
    pub fn new(scores: Vec<Vec<f64>>, gold: Vec<Vec<f64>>, threshold: f64) -> Result<Self> {
        if scores.len() != gold.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} score rows vs {} gold rows",
                scores.len(),
                gold.len()
            )));
        }
        for (s, g) in scores.iter().zip(&gold) {
            if s.len() != g.len() {
                return Err(CoreError::ShapeMismatch("ragged score/gold rows".into()));
            }
            if g.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(CoreError::ShapeMismatch("gold entries must be 0 or 1".into()));
            }
        }
        Ok(EvalBatch { scores, gold, threshold })
    }

    pub fn n_labels(&self) -> usize {
        self.scores.first().map(Vec::len).unwrap_or(0)
    }
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 over TP/FP/FN pooled across every (document, label) cell.
pub fn micro_f1(batch: &EvalBatch) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (s, g) in batch.scores.iter().zip(&batch.gold) {
        for (score, gold) in s.iter().zip(g) {
            let pred = *score >= batch.threshold;
            match (pred, *gold == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    f1_from_counts(tp, fp, fn_)
}

/// Mean of per-label F1 over the full label space (0/0 counts as 0).
pub fn macro_f1(batch: &EvalBatch) -> f64 {
    let n_labels = batch.n_labels();
    if n_labels == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for l in 0..n_labels {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (s, g) in batch.scores.iter().zip(&batch.gold) {
            let pred = s[l] >= batch.threshold;
            match (pred, g[l] == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        total += f1_from_counts(tp, fp, fn_);
    }
    total / n_labels as f64
}

/// Rank-sum AUC with average ranks on ties; `None` without both classes.
fn auc_ranked(pairs: &[(f64, bool)]) -> Option<f64> {
    let n_pos = pairs.iter().filter(|(_, y)| *y).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.partial_cmp(&pairs[b].0).expect("finite scores"));
    let mut ranks = alloc::vec![0.0; pairs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].0 == pairs[order[i]].0 {
            j += 1;
        }
        // average rank for the tie group [i, j], ranks are 1-based
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 =
        pairs.iter().zip(&ranks).filter(|((_, y), _)| *y).map(|(_, r)| *r).sum();
    Some((pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// AUC over all (document, label) cells flattened.
pub fn micro_auc(batch: &EvalBatch) -> Option<f64> {
    let pairs: Vec<(f64, bool)> = batch
        .scores
        .iter()
        .zip(&batch.gold)
        .flat_map(|(s, g)| s.iter().zip(g).map(|(x, y)| (*x, *y == 1.0)))
        .collect();
    auc_ranked(&pairs)
}

/// Mean per-label AUC over labels with both classes; also reports how many
/// labels were excluded for lacking one.
pub fn macro_auc(batch: &EvalBatch) -> (Option<f64>, usize) {
    let n_labels = batch.n_labels();
    let mut total = 0.0;
    let mut counted = 0usize;
    for l in 0..n_labels {
        let pairs: Vec<(f64, bool)> = batch
            .scores
            .iter()
            .zip(&batch.gold)
            .map(|(s, g)| (s[l], g[l] == 1.0))
            .collect();
        if let Some(a) = auc_ranked(&pairs) {
            total += a;
            counted += 1;
        }
    }
    if counted == 0 {
        (None, n_labels)
    } else {
        (Some(total / counted as f64), n_labels - counted)
    }
}

/// Fraction of a document's top-N codes that are gold, averaged over
/// documents. Ties rank the lower label index first; the denominator is
/// always N.
pub fn precision_at_n(batch: &EvalBatch, n: usize) -> Result<f64> {
    let n_labels = batch.n_labels();
    if n == 0 || n > n_labels {
        return Err(CoreError::BadPrecisionAtN { n, labels: n_labels });
    }
    if batch.scores.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, g) in batch.scores.iter().zip(&batch.gold) {
        let mut idx: Vec<usize> = (0..n_labels).collect();
        idx.sort_by(|&a, &b| {
            s[b].partial_cmp(&s[a]).expect("finite scores").then(a.cmp(&b))
        });
        let hits = idx[..n].iter().filter(|&&l| g[l] == 1.0).count();
        total += hits as f64 / n as f64;
    }
    Ok(total / batch.scores.len() as f64)
}

/// The structured evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub micro_auc: Option<f64>,
    pub macro_auc: Option<f64>,
    /// Keys are `p_at_{N}`.
    pub p_at: BTreeMap<String, f64>,
    pub n_docs: usize,
    pub threshold: f64,
    pub config_hash: String,
    pub excluded_label_count: usize,
}

/// All five metrics over one batch.
pub fn evaluate_batch(batch: &EvalBatch, ns: &[usize], config_hash: &str) -> Result<MetricsReport> {
    let (macro_auc_value, excluded) = macro_auc(batch);
    let mut p_at = BTreeMap::new();
    for &n in ns {
        p_at.insert(format!("p_at_{n}"), precision_at_n(batch, n)?);
    }
    Ok(MetricsReport {
        micro_f1: micro_f1(batch),
        macro_f1: macro_f1(batch),
        micro_auc: micro_auc(batch),
        macro_auc: macro_auc_value,
        p_at,
        n_docs: batch.scores.len(),
        threshold: batch.threshold,
        config_hash: config_hash.into(),
        excluded_label_count: excluded,
    })
}
