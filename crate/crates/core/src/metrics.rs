//! Evaluation metrics: natural-log loss, tie-corrected ROC AUC, accuracy.

use crate::error::{Error, Result};

/// Scores for one prediction set. `log_loss` is the per-sample mean in
/// natural-log units (comparison tables print it with a ×100 factor);
/// `roc_auc` is a percentage and only defined for binary tasks.
#[derive(Clone, Copy, Debug)]
pub struct Metrics {
    pub log_loss: f64,
    pub roc_auc: Option<f64>,
    pub accuracy: f64,
}

const PROB_CLIP: f64 = 1e-15;

/// Mean negative log probability of the true class. `probs` is `[n, classes]`
/// row-major.
pub fn log_loss(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if probs.len() != n * classes {
        return Err(Error::dimension("log_loss", &[probs.len()], &[n, classes]));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data {
                row: i,
                col: 0,
                msg: format!("label {label} out of range for {classes} classes"),
            });
        }
        let p = probs[i * classes + label].clamp(PROB_CLIP, 1.0);
        total -= p.ln();
    }
    Ok(total / n as f64)
}

/// Tie-corrected rank-statistic ROC AUC as a percentage. `labels` must hold
/// both classes; scores are probabilities (or any monotone score) for class 1.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dimension("roc_auc", &[scores.len()], &[labels.len()]));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract(
            "ROC AUC undefined: labels contain a single class",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // average ranks across ties
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let auc = (pos_rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0)
        / (n_pos as f64 * n_neg as f64);
    Ok(auc * 100.0)
}

pub fn accuracy(probs: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &probs[i * classes..(i + 1) * classes];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            argmax == label
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Full metric set for a probability matrix; AUC only when `classes == 2`.
pub fn evaluate(probs: &[f64], classes: usize, labels: &[usize]) -> Result<Metrics> {
    let ll = log_loss(probs, classes, labels)?;
    let auc = if classes == 2 {
        let scores: Vec<f64> = (0..labels.len()).map(|i| probs[i * 2 + 1]).collect();
        Some(roc_auc(&scores, labels)?)
    } else {
        None
    };
    Ok(Metrics {
        log_loss: ll,
        roc_auc: auc,
        accuracy: accuracy(probs, classes, labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation_auc_is_100() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 100.0);
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        // 6-point hand case with a tie
        let scores = [0.3, 0.5, 0.5, 0.7, 0.2, 0.9];
        let labels = [0, 1, 0, 1, 0, 1];
        // O(n^2) oracle: wins + half-ties over pos*neg pairs
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        let oracle = wins / total * 100.0;
        assert!((roc_auc(&scores, &labels).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn auc_single_class_is_error() {
        assert!(roc_auc(&[0.1, 0.9], &[1, 1]).is_err());
    }

    #[test]
    fn log_loss_of_prior_predictions_is_prior_entropy() {
        // labels: 3 of class 0, 1 of class 1 → prior (0.75, 0.25)
        let labels = [0, 0, 0, 1];
        let probs: Vec<f64> = labels.iter().flat_map(|_| [0.75, 0.25]).collect();
        let entropy = -(0.75f64.ln() * 0.75 + 0.25f64.ln() * 0.25);
        assert!((log_loss(&probs, 2, &labels).unwrap() - entropy).abs() < 1e-12);
    }

    #[test]
    fn uniform_multiclass_log_loss_is_ln_c() {
        let labels = [0, 1, 2, 3, 4];
        let probs = vec![0.2; 25];
        assert!((log_loss(&probs, 5, &labels).unwrap() - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn clipped_log_loss_is_finite() {
        let labels = [1];
        let probs = [1.0, 0.0];
        assert!(log_loss(&probs, 2, &labels).unwrap().is_finite());
    }

    #[test]
    fn accuracy_counts_argmax() {
        let labels = [0, 1];
        let probs = [0.9, 0.1, 0.2, 0.8];
        assert_eq!(accuracy(&probs, 2, &labels), 1.0);
    }
}
