use log::warn;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Per-feature and label z-score statistics fitted on training years.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
    /// Feature columns whose variance was zero; their std is clamped to 1.
    pub flagged: Vec<usize>,
}

impl NormStats {
    pub fn normalize_label(&self, y: f64) -> f64 {
        (y - self.label_mean) / self.label_std
    }

    pub fn denormalize_label(&self, z: f64) -> f64 {
        z * self.label_std + self.label_mean
    }

    pub fn normalize_features(&self, x: &Tensor) -> Result<Tensor> {
        self.map_features(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize_features(&self, x: &Tensor) -> Result<Tensor> {
        self.map_features(x, |v, m, s| v * s + m)
    }

    fn map_features(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let d = self.feature_mean.len();
        if x.cols() != d {
            return Err(Error::dim(format!("{} feature columns, stats cover {d}", x.cols())));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % d;
                f(v, self.feature_mean[j], self.feature_std[j])
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

fn mean_std(sum: f64, sum_sq: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// Fits feature statistics over every day of every record and label
/// statistics over the labelled records.
pub fn zscore_fit(train: &Dataset) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::contract("cannot fit normalisation on an empty training set"));
    }
    let d = train.d();
    let mut mean = vec![0.0; d];
    let mut n = 0.0;
    for r in train.records() {
        for t in 0..r.t() {
            for (m, v) in mean.iter_mut().zip(r.features.row(t)) {
                *m += v;
            }
            n += 1.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    // Two-pass variance keeps constant columns at exactly zero.
    let mut var = vec![0.0; d];
    for r in train.records() {
        for t in 0..r.t() {
            for ((s, v), m) in var.iter_mut().zip(r.features.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let mut std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let mut flagged = Vec::new();
    for (j, s) in std.iter_mut().enumerate() {
        if *s <= 1e-12 * (1.0 + mean[j].abs()) {
            warn!("feature column {j} has zero variance; std clamped to 1");
            flagged.push(j);
            *s = 1.0;
        }
    }

    let labels: Vec<f64> = train.records().iter().filter_map(|r| r.label()).collect();
    if labels.is_empty() {
        return Err(Error::contract("training set has no labels"));
    }
    let (ls, lss) = labels.iter().fold((0.0, 0.0), |(s, ss), y| (s + y, ss + y * y));
    let (label_mean, mut label_std) = mean_std(ls, lss, labels.len() as f64);
    if label_std <= 1e-12 {
        warn!("labels have zero variance; label std clamped to 1");
        label_std = 1.0;
    }
    Ok(NormStats {
        feature_mean: mean,
        feature_std: std,
        label_mean,
        label_std,
        flagged,
    })
}

/// Normalises features and (where present) labels.
pub fn zscore_apply(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    let records = ds
        .records()
        .iter()
        .map(|r| {
            let x = stats.normalize_features(&r.features)?;
            let y = r.label().map(|y| stats.normalize_label(y));
            Ok(r.with_features(x).with_label(y))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records, ds.audit().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CountyYearRecord, LabelAudit};

    fn ds() -> Dataset {
        let audit = LabelAudit::new_handle();
        let recs = (0..4)
            .map(|i| {
                let f = i as f64;
                let x = Tensor::matrix(3, 3, vec![f, 7.0, f * f, f + 1.0, 7.0, -f, 2.0 * f, 7.0, 0.5]).unwrap();
                CountyYearRecord::new(format!("c{i}"), 2000 + i, x, Some(100.0 + 10.0 * f), audit.clone())
                    .unwrap()
            })
            .collect();
        Dataset::new(recs, audit).unwrap()
    }

    #[test]
    fn fitted_columns_have_zero_mean() {
        let d = ds();
        let stats = zscore_fit(&d).unwrap();
        let z = zscore_apply(&d, &stats).unwrap();
        for j in 0..3 {
            let (mut s, mut ss, mut n) = (0.0, 0.0, 0.0);
            for r in z.records() {
                for t in 0..3 {
                    let v = r.features.get(t, j);
                    s += v;
                    ss += v * v;
                    n += 1.0;
                }
            }
            assert!((s / n).abs() < 1e-10);
            if j != 1 {
                assert!((ss / n - 1.0).abs() < 1e-10);
            }
        }
        let labels: Vec<f64> = z.records().iter().filter_map(|r| r.label()).collect();
        assert!(labels.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn constant_column_is_flagged_and_zeroed() {
        let d = ds();
        let stats = zscore_fit(&d).unwrap();
        assert_eq!(stats.flagged, vec![1]);
        assert_eq!(stats.feature_std[1], 1.0);
        let z = zscore_apply(&d, &stats).unwrap();
        assert!(z.records().iter().all(|r| (0..3).all(|t| r.features.get(t, 1) == 0.0)));
    }

    #[test]
    fn inversion_recovers_original() {
        let d = ds();
        let stats = zscore_fit(&d).unwrap();
        let z = zscore_apply(&d, &stats).unwrap();
        for (a, b) in d.records().iter().zip(z.records()) {
            let back = stats.denormalize_features(&b.features).unwrap();
            assert!(back.max_abs_diff(&a.features) < 1e-10);
            let y = stats.denormalize_label(b.label().unwrap());
            assert!((y - a.label().unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_training_set_is_contract_error() {
        let audit = LabelAudit::new_handle();
        let empty = Dataset::new(vec![], audit).unwrap();
        assert!(matches!(zscore_fit(&empty), Err(Error::Contract(_))));
    }
}
