//! Ranking metrics: AU-ROC (Mann-Whitney form), AU-PR (average precision),
//! micro/macro pooling over labels, and per-fold mean/std aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{DynplError, Result};

/// Parallel score/label arrays for one evaluation set.
#[derive(Debug, Clone, Default)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Self {
        assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
        debug_assert!(labels.iter().all(|&y| y <= 1));
        ScoredSet { scores, labels }
    }

    pub fn push(&mut self, score: f64, label: u8) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// AU-ROC as the Mann-Whitney statistic: the fraction of (positive, negative)
/// pairs ranked correctly, with ties counted as one half. Computed via
/// midranks in O(n log n). Returns None when only one class is present.
pub fn au_roc(set: &ScoredSet) -> Option<f64> {
    let n = set.len();
    let pos = set.labels.iter().filter(|&&y| y == 1).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].partial_cmp(&set.scores[b]).unwrap());

    // midrank sum of positives, handling tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if set.labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// AU-PR as average precision: the step-wise integral of precision over
/// recall at each positive in descending-score order, with tie groups
/// processed as a single threshold step. Returns None with no positives.
pub fn au_pr(set: &ScoredSet) -> Option<f64> {
    let n = set.len();
    let total_pos = set.labels.iter().filter(|&&y| y == 1).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[b].partial_cmp(&set.scores[a]).unwrap());

    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let tp_group = order[i..=j]
            .iter()
            .filter(|&&idx| set.labels[idx] == 1)
            .count();
        tp += tp_group;
        seen += j - i + 1;
        if tp_group > 0 {
            let precision = tp as f64 / seen as f64;
            ap += precision * tp_group as f64 / total_pos as f64;
        }
        i = j + 1;
    }
    Some(ap)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MicroMacro {
    pub micro_au_roc: f64,
    pub macro_au_roc: f64,
    pub micro_au_pr: f64,
    pub macro_au_pr: f64,
    /// labels skipped in the macro averages because the metric was undefined
    pub skipped_au_roc: usize,
    pub skipped_au_pr: usize,
}

/// Micro pools all (instance, label) pairs into one set; macro averages the
/// per-label values, skipping labels where the metric is undefined.
pub fn micro_macro(sets: &[ScoredSet]) -> Result<MicroMacro> {
    if sets.is_empty() {
        return Err(DynplError::InvalidInput("no label sets".into()));
    }
    let mut pooled = ScoredSet::default();
    for s in sets {
        pooled.scores.extend_from_slice(&s.scores);
        pooled.labels.extend_from_slice(&s.labels);
    }
    let mut roc_vals = Vec::new();
    let mut pr_vals = Vec::new();
    let mut skipped_roc = 0;
    let mut skipped_pr = 0;
    for s in sets {
        match au_roc(s) {
            Some(v) => roc_vals.push(v),
            None => skipped_roc += 1,
        }
        match au_pr(s) {
            Some(v) => pr_vals.push(v),
            None => skipped_pr += 1,
        }
    }
    let micro_roc = au_roc(&pooled);
    let micro_pr = au_pr(&pooled);
    if roc_vals.is_empty() && pr_vals.is_empty() && micro_roc.is_none() && micro_pr.is_none() {
        return Err(DynplError::Data(
            "no label has a defined metric value".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(MicroMacro {
        micro_au_roc: micro_roc.unwrap_or(f64::NAN),
        macro_au_roc: if roc_vals.is_empty() {
            f64::NAN
        } else {
            mean(&roc_vals)
        },
        micro_au_pr: micro_pr.unwrap_or(f64::NAN),
        macro_au_pr: if pr_vals.is_empty() {
            f64::NAN
        } else {
            mean(&pr_vals)
        },
        skipped_au_roc: skipped_roc,
        skipped_au_pr: skipped_pr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Fold aggregation with the sample (n-1) standard deviation.
pub fn aggregate(values: &[f64]) -> MeanStd {
    assert!(values.len() >= 2, "aggregation needs at least two folds");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}
