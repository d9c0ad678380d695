//! Brute-force references for classification metrics and patient splits.

use gaunet_core::dataset::{split_patient_level, SampleRecord, DEFAULT_RATIOS};
use gaunet_core::evaluation::{classification_metrics, ClassificationMetrics};
use gaunet_core::rng::stream;
use rand::Rng;

/// Pairwise `P(s_pos > s_neg) + P(tie) / 2`.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn onehot(pred: &[usize], c: usize) -> Vec<Vec<f64>> {
    pred.iter()
        .map(|&p| (0..c).map(|k| f64::from(u8::from(k == p))).collect())
        .collect()
}

/// Metrics from an explicit confusion matrix; `None` when fewer than two
/// classes occur among the labels.
pub fn confusion_oracle(labels: &[usize], pred: &[usize], c: usize) -> Option<ClassificationMetrics> {
    let mut m = vec![vec![0usize; c]; c];
    for (&l, &p) in labels.iter().zip(pred) {
        m[l][p] += 1;
    }
    let row = |k: usize| m[k].iter().sum::<usize>();
    let col = |k: usize| (0..c).map(|t| m[t][k]).sum::<usize>();
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let in_labels: Vec<usize> = (0..c).filter(|&k| row(k) > 0).collect();
    if in_labels.len() < 2 {
        return None;
    }
    let scores = onehot(pred, c);
    let auc = |k: usize| {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        pairwise_auc(&s, &pos).unwrap()
    };
    let accuracy = div((0..c).map(|k| m[k][k]).sum(), labels.len());
    if c == 2 {
        return Some(ClassificationMetrics {
            accuracy,
            precision: div(m[1][1], col(1)),
            recall: div(m[1][1], row(1)),
            auc: auc(1),
        });
    }
    let involved: Vec<usize> = (0..c).filter(|&k| row(k) > 0 || col(k) > 0).collect();
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    Some(ClassificationMetrics {
        accuracy,
        precision: mean(involved.iter().map(|&k| div(m[k][k], col(k))).collect()),
        recall: mean(involved.iter().map(|&k| div(m[k][k], row(k))).collect()),
        auc: mean(in_labels.iter().map(|&k| auc(k)).collect()),
    })
}

fn vectors(len: usize, c: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..c.pow(len as u32)).map(move |mut code| {
        (0..len)
            .map(|_| {
                let d = code % c;
                code /= c;
                d
            })
            .collect()
    })
}

/// Predictions paired with each label vector of length above four: a few
/// deterministic corruptions instead of all `c^len` alternatives.
fn derived_predictions(labels: &[usize], c: usize) -> Vec<Vec<usize>> {
    let n = labels.len();
    vec![
        labels.to_vec(),
        labels.iter().map(|&l| (l + 1) % c).collect(),
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| if i % 2 == 0 { l } else { (l + 2) % c })
            .collect(),
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| if i < n / 2 { l } else { 0 })
            .collect(),
        vec![c - 1; n],
        (0..n).map(|i| i % c).collect(),
        labels.iter().rev().copied().collect(),
    ]
}

fn agrees(a: &ClassificationMetrics, b: &ClassificationMetrics) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
    close(a.accuracy, b.accuracy) && close(a.precision, b.precision) && close(a.recall, b.recall) && close(a.auc, b.auc)
}

#[derive(Debug, Default)]
pub struct OracleTally {
    pub compared: usize,
    pub mismatches: Vec<String>,
}

/// Every label vector of length 1..=8 over `classes` classes; all prediction
/// vectors up to length 4, derived ones beyond.
pub fn exhaustive_metrics_check(classes: usize) -> OracleTally {
    let mut tally = OracleTally::default();
    for len in 1..=8 {
        for labels in vectors(len, classes) {
            let preds: Vec<Vec<usize>> = if len <= 4 {
                vectors(len, classes).collect()
            } else {
                derived_predictions(&labels, classes)
            };
            for pred in preds {
                tally.compared += 1;
                let got = classification_metrics(&onehot(&pred, classes), &labels);
                match (confusion_oracle(&labels, &pred, classes), got) {
                    (None, Err(_)) => {}
                    (Some(want), Ok(got)) if agrees(&want, &got) => {}
                    (want, got) => tally
                        .mismatches
                        .push(format!("{labels:?}/{pred:?}: {want:?} vs {got:?}")),
                }
            }
        }
    }
    tally
}

/// Synthetic patients (`10..=200`, `1..=50` records each) split under `seed`.
/// Returns a description of the first violated property.
pub fn check_split(seed: u64) -> Result<(), String> {
    let mut rng = stream(seed, "split-cohort");
    let patients = rng.random_range(10..=200usize);
    let mut records = Vec::new();
    let mut largest = 0;
    for p in 0..patients {
        let n = rng.random_range(1..=50usize);
        largest = largest.max(n);
        for r in 0..n {
            records.push(SampleRecord {
                image_path: format!("p{p}_{r}.png"),
                class_id: rng.random_range(0..2),
                patient_id: format!("patient-{p}"),
            });
        }
    }
    let split = split_patient_level(&records, DEFAULT_RATIOS, seed).map_err(|e| e.to_string())?;
    let mut owner = vec![None; records.len()];
    for (k, part) in split.parts().iter().enumerate() {
        for &i in part.iter() {
            if owner[i].replace(k).is_some() {
                return Err(format!("record {i} assigned twice"));
            }
        }
    }
    if owner.iter().any(Option::is_none) {
        return Err("record left unassigned".to_string());
    }
    let mut patient_split = std::collections::HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if *patient_split.entry(&r.patient_id).or_insert(owner[i]) != owner[i] {
            return Err(format!("{} spans two splits", r.patient_id));
        }
    }
    let total = records.len() as f64;
    for (k, part) in split.parts().iter().enumerate() {
        let gap = (part.len() as f64 - DEFAULT_RATIOS[k] * total).abs();
        if gap > (2 * largest) as f64 {
            return Err(format!(
                "split {k}: {} records, target {:.1}, largest patient {largest}",
                part.len(),
                DEFAULT_RATIOS[k] * total
            ));
        }
    }
    Ok(())
}
