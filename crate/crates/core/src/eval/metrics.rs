use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("metric input"));
    }
    let mut pos = 0;
    for &y in labels {
        match y {
            0 => {}
            1 => pos += 1,
            _ => return Err(Error::Invalid(format!("label {y} is not 0/1"))),
        }
    }
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by score, descending; ties keep input order.
fn by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// ROC AUC as a rank statistic with average ranks for ties: the probability
/// that a random positive outscores a random negative, ties counted as ½.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("roc_auc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tie group spanning ranks i+1..=j gets (i+1+j)/2.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = idx[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum_pos += avg * pos_in_group as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision `Σ_k (R_k − R_{k−1})·P_k` over descending thresholds,
/// one threshold per distinct score.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, _) = check_inputs(scores, labels)?;
    if n_pos == 0 {
        return Err(Error::Invalid(
            "average_precision needs a positive label".into(),
        ));
    }
    let idx = by_score_desc(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let tp_before = tp;
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if tp > tp_before {
            let recall_step = (tp - tp_before) as f64 / n_pos as f64;
            ap += recall_step * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// Mean binary log-loss of probabilities, clamped away from 0 and 1.
pub fn log_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(probs, labels)?;
    if probs.is_empty() {
        return Err(Error::Invalid("log_loss of empty input".into()));
    }
    let eps = 1e-15;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_tied_auc() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(),
            1.0
        );
        assert_eq!(average_precision(&[0.9, 0.1], &[0, 1]).unwrap(), 0.5);
        assert!(average_precision(&[0.9, 0.1], &[0, 0]).is_err());
        // One tie group holding everything: precision is the prevalence.
        assert_eq!(average_precision(&[0.5; 4], &[1, 0, 0, 0]).unwrap(), 0.25);
    }

    #[test]
    fn rejects_bad_labels_and_lengths() {
        assert!(roc_auc(&[0.1, 0.2], &[1, 2]).is_err());
        assert!(average_precision(&[0.1], &[1, 0]).is_err());
    }
}
