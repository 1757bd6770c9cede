//! Accuracy and ROC AUC.

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[i8]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, i8::MIN), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn accuracy(predictions: &[u32], labels: &[u32]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// ROC AUC via the Mann-Whitney rank-sum statistic with mid-ranks for ties.
///
/// `positive[i]` marks the class expected to score higher. Returns `None`
/// when either class is absent.
pub fn auc_rank(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // rank sum doubled: mid-ranks stay integral
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2
        let mid_x2 = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        rank_sum_x2 += mid_x2 * pos_in_group;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    let u_x2 = rank_sum_x2 - np * (np + 1);
    Some(u_x2 as f64 / (2 * np * nn) as f64)
}
