use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[i8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let pos = labels.iter().filter(|&&y| y > 0).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from midranks in `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum, kept in integers so the result is exact.
    let mut rank_sum2: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank2 = (start + 1 + end) as u64;
        let positives = order[start..end].iter().filter(|&&i| labels[i] > 0).count() as u64;
        rank_sum2 += midrank2 * positives;
        start = end;
    }
    let numerator2 = rank_sum2 - pos * (pos + 1);
    Ok(numerator2 as f64 / (2 * pos * neg) as f64)
}

/// Pairwise enumeration of [`roc_auc`], `O(P N)`.
pub fn roc_auc_brute_force(scores: &[f64], labels: &[i8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut twice: u64 = 0;
    for (&si, _) in scores.iter().zip(labels).filter(|(_, &y)| y > 0) {
        for (&sj, _) in scores.iter().zip(labels).filter(|(_, &y)| y <= 0) {
            twice += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}
