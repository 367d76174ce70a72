//! Evaluation metrics.

use std::cmp::Ordering;

/// Class-frequency-weighted mean of per-class recall. Classes that never
/// occur in `labels` carry no weight and are skipped.
pub fn weighted_accuracy(predicted: &[usize], labels: &[usize], classes: usize) -> Option<f64> {
    if labels.is_empty() || predicted.len() != labels.len() {
        return None;
    }
    let mut support = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        if y >= classes {
            return None;
        }
        support[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let n = labels.len() as f64;
    let mut acc = 0.0;
    for c in 0..classes {
        if support[c] == 0 {
            log::debug!("class {c} absent from evaluation targets; excluded from w-Acc");
            continue;
        }
        acc += (support[c] as f64 / n) * (hits[c] as f64 / support[c] as f64);
    }
    Some(acc)
}

/// Index of the largest score in each row; the first wins on ties.
pub fn argmax_rows(scores: &[f64], cols: usize) -> Vec<usize> {
    scores
        .chunks(cols)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

/// Precision averaged at each positive, ranking by descending score with
/// ties kept in index order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut seen = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            seen += 1;
            sum += seen as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Mean AP over tags; `scores` and `targets` are `[N, tags]` row-major.
/// Tags with no positives are skipped.
pub fn mean_average_precision(scores: &[f64], targets: &[bool], tags: usize) -> Option<f64> {
    if tags == 0 || scores.len() != targets.len() || scores.is_empty() {
        return None;
    }
    let n = scores.len() / tags;
    let mut aps = Vec::new();
    for t in 0..tags {
        let s: Vec<f64> = (0..n).map(|i| scores[i * tags + t]).collect();
        let y: Vec<bool> = (0..n).map(|i| targets[i * tags + t]).collect();
        match average_precision(&s, &y) {
            Some(ap) => aps.push(ap),
            None => log::debug!("tag {t} has no positives; excluded from mAP"),
        }
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}
