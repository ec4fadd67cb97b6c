use crate::error::{Error, Result};

/// Area under the ROC curve in percent: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Eval("NaN anomaly score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Eval(format!(
            "degenerate labels: {pos} positive, {neg} negative frames"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U statistic, kept integral
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        u2 += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    // single rounding of the exact ratio 100 * (u2 / 2) / (pos * neg)
    Ok((50 * u2) as f64 / (pos * neg) as f64)
}
