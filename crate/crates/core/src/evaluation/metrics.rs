//! Classification metrics and bootstrap confidence intervals.
//!
//! Two-class problems use the usual positive-class definitions with class 1
//! as positive. With three or more classes precision, recall and AUC are
//! macro averages of the one-vs-rest quantities.

use rand::Rng;

use crate::error::{Error, Result};
use crate::evaluation::classifier::argmax;
use crate::par;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mann-Whitney estimate of `P(score_pos > score_neg)` with ties counted half,
/// from average ranks. `None` when either side is empty.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

fn check_inputs(scores: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Metrics(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let c = scores[0].len();
    if c < 2 || scores.iter().any(|r| r.len() != c) {
        return Err(Error::Metrics(
            "score rows must share a width of at least 2".to_string(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Metrics(format!("label {bad} outside {c} classes")));
    }
    Ok(c)
}

/// Metrics of argmax predictions and per-class scores `[N][C]`.
pub fn classification_metrics(scores: &[Vec<f64>], labels: &[usize]) -> Result<ClassificationMetrics> {
    let c = check_inputs(scores, labels)?;
    let pred: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let mut tp = vec![0usize; c];
    let mut predicted = vec![0usize; c];
    let mut actual = vec![0usize; c];
    for (&p, &l) in pred.iter().zip(labels) {
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[l] += 1;
        }
    }
    let present = actual.iter().filter(|&&a| a > 0).count();
    if present < 2 {
        return Err(Error::Metrics(
            "AUC needs at least two classes among the labels".to_string(),
        ));
    }
    let accuracy = ratio(tp.iter().sum(), labels.len());
    let auc_of = |k: usize| {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        rank_auc(&s, &pos)
    };
    if c == 2 {
        return Ok(ClassificationMetrics {
            accuracy,
            precision: ratio(tp[1], predicted[1]),
            recall: ratio(tp[1], actual[1]),
            auc: auc_of(1).expect("both classes present"),
        });
    }
    let involved: Vec<usize> = (0..c).filter(|&k| actual[k] > 0 || predicted[k] > 0).collect();
    let macro_mean = |f: &dyn Fn(usize) -> f64| involved.iter().map(|&k| f(k)).sum::<f64>() / involved.len() as f64;
    let aucs: Vec<f64> = (0..c).filter_map(auc_of).collect();
    Ok(ClassificationMetrics {
        accuracy,
        precision: macro_mean(&|k| ratio(tp[k], predicted[k])),
        recall: macro_mean(&|k| ratio(tp[k], actual[k])),
        auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
    })
}

/// Point estimate with a percentile interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: Estimate,
    pub precision: Estimate,
    pub recall: Estimate,
    pub auc: Estimate,
}

/// Two-sided coverage of the bootstrap intervals.
pub const CI_LEVEL: f64 = 0.95;

fn percentile_interval(mut xs: Vec<f64>, value: f64) -> Estimate {
    if xs.is_empty() {
        return Estimate {
            value,
            lo: value,
            hi: value,
        };
    }
    xs.sort_by(f64::total_cmp);
    let tail = (1.0 - CI_LEVEL) / 2.0;
    let at = |q: f64| xs[((xs.len() - 1) as f64 * q).round() as usize];
    Estimate {
        value,
        lo: at(tail),
        hi: at(1.0 - tail),
    }
}

/// Metrics with percentile intervals from `replicates` resamples of the test
/// samples. Resamples whose labels collapse to one class are skipped.
pub fn bootstrap_report(
    scores: &[Vec<f64>],
    labels: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<ClassificationReport> {
    let point = classification_metrics(scores, labels)?;
    let n = labels.len();
    let draws = par::map_indexed(replicates, |b| {
        let mut rng = stream(seed, &format!("bootstrap-{b}"));
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let s: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        classification_metrics(&s, &l).ok()
    });
    let draws: Vec<ClassificationMetrics> = draws.into_iter().flatten().collect();
    let pick = |f: fn(&ClassificationMetrics) -> f64| draws.iter().map(f).collect::<Vec<_>>();
    Ok(ClassificationReport {
        accuracy: percentile_interval(pick(|m| m.accuracy), point.accuracy),
        precision: percentile_interval(pick(|m| m.precision), point.precision),
        recall: percentile_interval(pick(|m| m.recall), point.recall),
        auc: percentile_interval(pick(|m| m.auc), point.auc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn onehot(pred: &[usize], c: usize) -> Vec<Vec<f64>> {
        pred.iter()
            .map(|&p| (0..c).map(|k| if k == p { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 1, 0];
        let m = classification_metrics(&onehot(&labels, 3), &labels).unwrap();
        assert_eq!(
            m,
            ClassificationMetrics {
                accuracy: 1.0,
                precision: 1.0,
                recall: 1.0,
                auc: 1.0
            }
        );
    }

    #[test]
    fn binary_all_wrong() {
        let labels = [0, 1, 1, 0];
        let m = classification_metrics(&onehot(&[1, 0, 0, 1], 2), &labels).unwrap();
        assert_eq!(m.accuracy, 0.0);
        assert_eq!(m.auc, 0.0);
    }

    #[test]
    fn three_class_confusion() {
        // Rows are true classes: [[5,0,0],[1,4,0],[0,2,3]].
        let mut labels = Vec::new();
        let mut pred = Vec::new();
        for (t, row) in [[5, 0, 0], [1, 4, 0], [0, 2, 3]].iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                for _ in 0..count {
                    labels.push(t);
                    pred.push(p);
                }
            }
        }
        let m = classification_metrics(&onehot(&pred, 3), &labels).unwrap();
        assert_abs_diff_eq!(m.accuracy, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(m.precision, (5.0 / 6.0 + 4.0 / 6.0 + 1.0) / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.recall, (1.0 + 0.8 + 0.6) / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn auc_ties_count_half() {
        assert_eq!(rank_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(rank_auc(&[0.1, 0.9, 0.4], &[false, true, true]), Some(1.0));
        assert_eq!(rank_auc(&[0.1], &[true]), None);
    }

    #[test]
    fn single_class_labels_rejected() {
        assert!(classification_metrics(&onehot(&[0, 1], 2), &[1, 1]).is_err());
        assert!(classification_metrics(&[], &[]).is_err());
        assert!(classification_metrics(&onehot(&[0], 2), &[2]).is_err());
    }

    #[test]
    fn bootstrap_brackets_point_estimate() {
        let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let pred: Vec<usize> = (0..60).map(|i| if i % 7 == 0 { 1 - i % 2 } else { i % 2 }).collect();
        let r = bootstrap_report(&onehot(&pred, 2), &labels, 200, 3).unwrap();
        for e in [r.accuracy, r.precision, r.recall, r.auc] {
            assert!(e.lo <= e.value && e.value <= e.hi, "{e:?}");
        }
        assert_eq!(r, bootstrap_report(&onehot(&pred, 2), &labels, 200, 3).unwrap());
    }
}
