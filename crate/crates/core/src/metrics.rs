//! AUC, group AUC and log loss.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};

pub const LOGLOSS_CLAMP: f64 = 1e-7;

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CoreError::Dim {
            op,
            expected: a,
            got: b,
        });
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from the rank sum of positives after sorting,
/// with tied scores sharing their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths("auc", scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::NotDefined(
            "auc needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k] != 0).count();
        rank_sum += avg * pos_in_run as f64;
        i = j;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Record-count-weighted mean of per-group AUC. Groups containing a single
/// class are skipped entirely: they add to neither the numerator nor the
/// weight total.
pub fn gauc(scores: &[f64], labels: &[u8], groups: &[u64]) -> Result<f64> {
    check_lengths("gauc", scores.len(), labels.len())?;
    check_lengths("gauc", scores.len(), groups.len())?;
    let mut by_group: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let (mut num, mut den) = (0.0, 0.0);
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for idx in by_group.values() {
        s.clear();
        l.clear();
        s.extend(idx.iter().map(|&i| scores[i]));
        l.extend(idx.iter().map(|&i| labels[i]));
        if let Ok(a) = auc(&s, &l) {
            let w = idx.len() as f64;
            num += w * a;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(CoreError::NotDefined(
            "gauc needs a group with both classes".into(),
        ));
    }
    Ok(num / den)
}

/// Mean binary cross-entropy of probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn logloss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths("logloss", probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(CoreError::NotDefined("logloss of an empty set".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
            if y != 0 {
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
    fn auc_reference_values() {
        let a = auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_not_defined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(CoreError::NotDefined(_))));
    }

    #[test]
    fn gauc_weights_by_group_size() {
        // group 1: size 2, AUC 1.0; group 2: size 6, AUC 0.5 (all tied)
        let scores = [0.1, 0.9, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        let labels = [0, 1, 0, 1, 0, 1, 0, 1];
        let groups = [1, 1, 2, 2, 2, 2, 2, 2];
        let g = gauc(&scores, &labels, &groups).unwrap();
        assert!((g - 0.625).abs() < 1e-12);
    }

    #[test]
    fn gauc_single_group_equals_auc() {
        let s = [0.2, 0.7, 0.4, 0.1, 0.9];
        let l = [0, 1, 1, 0, 0];
        assert_eq!(gauc(&s, &l, &[7; 5]).unwrap(), auc(&s, &l).unwrap());
    }

    #[test]
    fn gauc_skips_single_class_groups() {
        let s = [0.1, 0.9, 0.3, 0.6];
        let l = [0, 1, 0, 0];
        assert_eq!(gauc(&s, &l, &[1, 1, 2, 2]).unwrap(), 1.0);
        assert!(gauc(&s[2..], &l[2..], &[2, 2]).is_err());
    }

    #[test]
    fn logloss_reference_values() {
        let l = logloss(&[0.5; 4], &[0, 1, 1, 0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = logloss(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!(l > 0.0 && l < 2e-7);
    }
}
