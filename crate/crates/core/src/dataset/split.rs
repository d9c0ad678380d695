//! Patient-level train/val/test partitioning.

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use super::SampleRecord;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Record indices per split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl DatasetSplit {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Shuffles patients by `seed`, then hands each patient to the split whose
/// record count lags its target the most (ties go to the earlier split).
pub fn split_patient_level(records: &[SampleRecord], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Dataset(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut patients: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for (i, r) in records.iter().enumerate() {
        patients.entry(r.patient_id.as_str()).or_default().push(i);
    }
    if patients.len() < 3 {
        return Err(Error::Dataset(format!(
            "{} distinct patients cannot fill 3 splits",
            patients.len()
        )));
    }
    let mut order: Vec<Vec<usize>> = patients.into_values().collect();
    order.shuffle(&mut stream(seed, "split"));

    let total = records.len() as f64;
    let mut parts: [Vec<usize>; 3] = Default::default();
    for group in order {
        let lag = |k: usize| ratios[k] * total - parts[k].len() as f64;
        let mut best = 0;
        for k in 1..3 {
            if lag(k) > lag(best) {
                best = k;
            }
        }
        parts[best].extend(group);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit {
        train,
        val,
        test,
        ratios,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn singles(n: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| SampleRecord {
                image_path: format!("{i}.png"),
                class_id: i % 2,
                patient_id: format!("p{i}"),
            })
            .collect()
    }

    #[test]
    fn ten_single_patients() {
        for seed in 0..20 {
            let s = split_patient_level(&singles(10), DEFAULT_RATIOS, seed).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let r = singles(50);
        let a = split_patient_level(&r, DEFAULT_RATIOS, 3).unwrap();
        assert_eq!(a, split_patient_level(&r, DEFAULT_RATIOS, 3).unwrap());
        assert_ne!(a, split_patient_level(&r, DEFAULT_RATIOS, 4).unwrap());
    }

    #[test]
    fn too_few_patients() {
        let mut r = singles(5);
        for rec in &mut r {
            rec.patient_id = if rec.image_path.as_str() < "2" {
                "a".into()
            } else {
                "b".into()
            };
        }
        assert!(split_patient_level(&r, DEFAULT_RATIOS, 0).is_err());
    }

    #[test]
    fn rejects_bad_ratios() {
        assert!(split_patient_level(&singles(10), [0.5, 0.5, 0.5], 0).is_err());
    }
}
