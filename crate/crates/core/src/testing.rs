//! Independent reference oracles used by unit, integration and acceptance
//! tests. Nothing here shares code with the paths it checks.

/// Central finite differences of `f` at `x0` with step `eps`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], eps: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    (0..x0.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Denominator floor for entries where both gradients vanish.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, RELATIVE_ERROR_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Exhaustive O(n^2) one-vs-rest AUC: the fraction of (positive, negative)
/// pairs ordered correctly, ties counting one half. `None` when a class has
/// no positives or no negatives.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Balanced AUC by the pairwise oracle: mean over scoreable classes, in
/// class order. `scores` is row-major `n x classes`.
pub fn pairwise_balanced_auc(scores: &[f64], labels: &[usize], classes: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..classes {
        let column: Vec<f64> = scores.chunks(classes).map(|row| row[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        if let Some(auc) = pairwise_auc(&column, &positive) {
            total += auc;
            used += 1;
        }
    }
    (used > 0).then(|| total / used as f64)
}

/// Balanced accuracy from an explicit confusion matrix, argmax taking the
/// first maximal column.
pub fn confusion_balanced_accuracy(scores: &[f64], labels: &[usize], classes: usize) -> Option<f64> {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (row, &y) in scores.chunks(classes).zip(labels) {
        let mut best = 0;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        confusion[y][best] += 1;
    }
    let mut total = 0.0;
    let mut present = 0usize;
    for (c, row) in confusion.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support > 0 {
            total += row[c] as f64 / support as f64;
            present += 1;
        }
    }
    (present > 0).then(|| total / present as f64)
}

/// Plain-float batch-mean `KL(softmax(guide) ‖ softmax(pred))` over
/// row-major `rows x cols` logits.
pub fn reference_kl(guide: &[f64], pred: &[f64], cols: usize) -> f64 {
    let log_softmax = |row: &[f64]| -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        row.iter().map(|v| v - max - z.ln()).collect()
    };
    let rows = guide.len() / cols;
    let mut total = 0.0;
    for (g, p) in guide.chunks(cols).zip(pred.chunks(cols)) {
        let lg = log_softmax(g);
        let lp = log_softmax(p);
        for j in 0..cols {
            total += lg[j].exp() * (lg[j] - lp[j]);
        }
    }
    total / rows as f64
}
