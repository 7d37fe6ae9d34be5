//! Selection and prediction metrics.

use std::collections::BTreeSet;

use crate::data::RankPairSet;
use crate::error::{FsaError, Result};

/// Percent of `truth` present in `selected`.
pub fn pcd(selected: &[usize], truth: &[usize]) -> Result<f64> {
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    if truth.is_empty() {
        return Err(FsaError::Contract("pcd needs a nonempty true support".into()));
    }
    let selected: BTreeSet<usize> = selected.iter().copied().collect();
    Ok(100.0 * selected.intersection(&truth).count() as f64 / truth.len() as f64)
}

/// Percent of runs whose selected set equals the true set.
pub fn detection_rate(runs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    if runs.is_empty() {
        return Err(FsaError::Contract("detection rate over zero runs".into()));
    }
    let hits = runs
        .iter()
        .filter(|(s, t)| {
            let s: BTreeSet<_> = s.iter().collect();
            let t: BTreeSet<_> = t.iter().collect();
            s == t
        })
        .count();
    Ok(100.0 * hits as f64 / runs.len() as f64)
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half. Labels are `+1` / `-1` (anything `> 0` is positive).
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(FsaError::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(FsaError::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid = (start + 1 + end) as f64 / 2.0;
        let pos = order[start..end].iter().filter(|&&i| labels[i] > 0.0).count();
        rank_sum_pos += mid * pos as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn rmse(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(FsaError::Contract(format!(
            "{} predictions for {} targets",
            pred.len(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(FsaError::UndefinedMetric("RMSE of an empty vector".into()));
    }
    let sse: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Fraction of rows where the sign of the score (`>= 0` means `+1`)
/// disagrees with the label.
pub fn misclassification_error(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(FsaError::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(FsaError::UndefinedMetric("error rate of an empty set".into()));
    }
    let wrong = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| (**s >= 0.0) != (**y > 0.0))
        .count();
    Ok(wrong as f64 / scores.len() as f64)
}

/// Weighted fraction of preferences the scores get wrong. A pair with
/// `r > 1/2` prefers `i`, `r < 1/2` prefers `j`; its weight is `|2r - 1|`
/// and ties (`r = 1/2`) carry none. A preference is violated when the
/// preferred row does not score strictly higher.
pub fn rank_disagreement(scores: &[f64], pairs: &RankPairSet) -> Result<f64> {
    let mut total = 0.0;
    let mut wrong = 0.0;
    for p in pairs.pairs() {
        if p.i >= scores.len() || p.j >= scores.len() {
            return Err(FsaError::Contract(format!(
                "pair ({}, {}) outside {} scores",
                p.i,
                p.j,
                scores.len()
            )));
        }
        let w = 2.0 * p.r - 1.0;
        if w == 0.0 {
            continue;
        }
        let (better, worse) = if w > 0.0 { (p.i, p.j) } else { (p.j, p.i) };
        total += w.abs();
        if scores[better] <= scores[worse] {
            wrong += w.abs();
        }
    }
    if total == 0.0 {
        return Err(FsaError::UndefinedMetric("no strictly preferred pairs".into()));
    }
    Ok(wrong / total)
}
