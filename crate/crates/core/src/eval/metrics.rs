//! Threshold-free detection metrics with outliers as the positive class.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Domain(format!("label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve, in Mann–Whitney form: the fraction of
/// (outlier, inlier) pairs where the outlier scores higher, ties counting ½.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both inliers and outliers".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // walk tie groups in ascending order, counting negatives strictly below
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let group = &idx[i..j];
        let gp = group.iter().filter(|&&k| labels[k] == 1).count();
        let gn = group.len() - gp;
        wins += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise average precision: mean over positives of the precision at the
/// positive's rank, ranking by descending score with ties in index order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one outlier".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &k) in idx.iter().enumerate() {
        if labels[k] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let ap = average_precision(&[4.0, 3.0, 2.0, 1.0], &[1, 0, 1, 0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[4.0, 3.0, 2.0, 1.0], &[0, 0, 0, 1]).unwrap(), 0.25);
        assert!(matches!(average_precision(&[0.1], &[0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..40).prop_flat_map(|n| {
            (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(0u8..2, n)).prop_filter("both classes", |(_, l)| {
                l.contains(&0) && l.contains(&1)
            })
        })
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps((s, l) in scored()) {
            let t: Vec<f64> = s.iter().map(|x| (x * 0.7).exp() + 3.0).collect();
            prop_assert!((auc(&s, &l).unwrap() - auc(&t, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn auc_complement((s, l) in scored()) {
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert!((auc(&s, &l).unwrap() + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ap_is_one_iff_positives_lead((s, l) in scored()) {
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let min_pos = s.iter().zip(&l).filter(|(_, &y)| y == 1).map(|(x, _)| *x).fold(f64::INFINITY, f64::min);
            let max_neg = s.iter().zip(&l).filter(|(_, &y)| y == 0).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
            let ap = average_precision(&s, &l).unwrap();
            prop_assert_eq!(ap == 1.0, min_pos > max_neg);
        }
    }
}
