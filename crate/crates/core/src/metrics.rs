//! Multi-label classification and regression metrics.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassMetrics {
    pub f1: f64,
    /// `None` when the class has only one label value.
    pub auc: Option<f64>,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassificationMetrics {
    /// Micro accuracy in percent.
    pub acc: f64,
    /// Macro F1 in percent.
    pub f_score: f64,
    /// Macro ROC-AUC over classes with both label values.
    pub auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// Classes left out of the AUC average.
    pub auc_skipped: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

/// Scores and labels are `[n, classes]` row-major.
pub fn classification_metrics(
    scores: &[f64],
    labels: &[bool],
    classes: usize,
    threshold: f64,
) -> Result<ClassificationMetrics> {
    if classes == 0 || scores.is_empty() {
        return Err(Error::Input("classification metrics need at least one sample and class".into()));
    }
    if scores.len() != labels.len() || !scores.len().is_multiple_of(classes) {
        return Err(Error::shape("classification_metrics", &[scores.len()], &[labels.len(), classes]));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Input(format!("non-finite score {s}")));
    }
    let n = scores.len() / classes;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= threshold) == y)
        .count();
    let mut per_class = Vec::with_capacity(classes);
    let mut auc_skipped = Vec::new();
    let mut column = Vec::with_capacity(n);
    let mut column_labels = Vec::with_capacity(n);
    for c in 0..classes {
        column.clear();
        column_labels.clear();
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for i in 0..n {
            let (s, y) = (scores[i * classes + c], labels[i * classes + c]);
            column.push(s);
            column_labels.push(y);
            match (s >= threshold, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        let auc = roc_auc(&column, &column_labels);
        if auc.is_none() {
            auc_skipped.push(c);
        }
        per_class.push(ClassMetrics {
            f1,
            auc,
            positives: tp + fn_,
        });
    }
    let aucs: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    Ok(ClassificationMetrics {
        acc: 100.0 * correct as f64 / scores.len() as f64,
        f_score: 100.0 * per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        per_class,
        auc_skipped,
    })
}

/// Mid-ranks (1-based) with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// ROC-AUC via the rank-sum statistic; ties count one half.
/// `None` unless both label values occur.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

pub fn regression_metrics(pred: &[f64], target: &[f64]) -> Result<RegressionMetrics> {
    if pred.len() != target.len() {
        return Err(Error::shape("regression_metrics", &[pred.len()], &[target.len()]));
    }
    if pred.len() < 2 {
        return Err(Error::Input("regression metrics need at least two samples".into()));
    }
    let n = pred.len() as f64;
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let mae = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("R2 of a constant target".into()));
    }
    Ok(RegressionMetrics {
        mse,
        mae,
        r2: 1.0 - mse * n / ss_tot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn brute_auc(s: &[f64], y: &[bool]) -> Option<f64> {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    pairs += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| num / pairs)
    }

    #[test]
    fn perfect_classifier() {
        let labels = [true, false, true, false, true, false, true, true, false];
        let scores: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
        let m = classification_metrics(&scores, &labels, 3, 0.5).unwrap();
        assert_eq!(m.acc, 100.0);
        assert_eq!(m.f_score, 100.0);
        assert_eq!(m.auc, Some(1.0));
    }

    #[test]
    fn perfect_ranking() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3], &[true, true, false]), Some(1.0));
    }

    #[test]
    fn empty_class_f1_is_zero_and_auc_skipped() {
        let m = classification_metrics(&[0.1, 0.9, 0.2, 0.8], &[false, true, false, true], 2, 0.5).unwrap();
        assert_eq!(m.per_class[0].f1, 0.0);
        assert_eq!(m.per_class[1].f1, 1.0);
        assert_eq!(m.auc_skipped, [0, 1]);
        assert_eq!(m.auc, None);
        assert_eq!(m.f_score, 50.0);
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut rng = SeededRng::new(11);
        for _ in 0..100 {
            let (n, c) = (50, 5);
            // Coarse scores so ties occur.
            let scores: Vec<f64> = (0..n * c).map(|_| (rng.uniform() * 20.0).floor() / 20.0).collect();
            let labels: Vec<bool> = (0..n * c).map(|_| rng.bernoulli(0.4)).collect();
            let m = classification_metrics(&scores, &labels, c, 0.5).unwrap();
            for k in 0..c {
                let col: Vec<f64> = (0..n).map(|i| scores[i * c + k]).collect();
                let lab: Vec<bool> = (0..n).map(|i| labels[i * c + k]).collect();
                let (a, b) = (m.per_class[k].auc, brute_auc(&col, &lab));
                assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regression_oracle() {
        let pred = [2.0, 3.5, 7.0, 1.0];
        let target = [2.5, 3.0, 6.0, 1.5];
        let m = regression_metrics(&pred, &target).unwrap();
        assert!((m.mse - (0.25 + 0.25 + 1.0 + 0.25) / 4.0).abs() < 1e-15);
        assert!((m.mae - 2.5 / 4.0).abs() < 1e-15);
        let mean = 13.0 / 4.0;
        let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
        assert!((m.r2 - (1.0 - 1.75 / ss_tot)).abs() < 1e-12);
    }

    #[test]
    fn constant_target_is_undefined() {
        assert!(matches!(
            regression_metrics(&[1.0, 2.0], &[3.0, 3.0]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn shape_errors() {
        assert!(classification_metrics(&[0.1, 0.2], &[true], 1, 0.5).is_err());
        assert!(classification_metrics(&[], &[], 3, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn auc_bounded_and_acc_in_range(
            v in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)
        ) {
            let (s, y): (Vec<f64>, Vec<bool>) = v.into_iter().unzip();
            let m = classification_metrics(&s, &y, 1, 0.5).unwrap();
            prop_assert!((0.0..=100.0).contains(&m.acc));
            if let Some(a) = m.auc {
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!((a - brute_auc(&s, &y).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn ranks_sum_to_triangle(v in proptest::collection::vec(-5i32..5, 1..40)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let n = v.len() as f64;
            prop_assert!((average_ranks(&v).iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        }
    }
}
