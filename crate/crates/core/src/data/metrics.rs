//! WA (overall accuracy), UA (macro recall) and support-weighted F1.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub wa: f64,
    pub ua: f64,
    pub wf1: f64,
}

pub fn compute_metrics(confusion: &[Vec<u64>]) -> Result<MetricsReport> {
    let k = confusion.len();
    if k == 0 || confusion.iter().any(|r| r.len() != k) {
        return Err(Error::shape("confusion matrix must be square and nonempty"));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::invalid("confusion matrix has no counts"));
    }
    let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<u64> = (0..k).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
    let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();

    let mut recall_sum = 0.0;
    let mut supported = 0;
    let mut wf1 = 0.0;
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        if support[c] == 0 {
            continue;
        }
        supported += 1;
        let recall = tp / support[c] as f64;
        recall_sum += recall;
        let precision = if predicted[c] == 0 {
            0.0
        } else {
            tp / predicted[c] as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        wf1 += support[c] as f64 / total as f64 * f1;
    }
    Ok(MetricsReport {
        confusion: confusion.to_vec(),
        wa: trace as f64 / total as f64,
        ua: recall_sum / supported as f64,
        wf1,
    })
}

/// Confusion counts from parallel label and prediction lists.
pub fn confusion_matrix(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if labels.len() != predictions.len() {
        return Err(Error::shape("labels and predictions differ in length"));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in labels.iter().zip(predictions) {
        if t >= classes || p >= classes {
            return Err(Error::invalid(format!("class id outside [0, {classes})")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationSummary {
    pub folds: usize,
    pub wa: MeanStd,
    pub ua: MeanStd,
    pub wf1: MeanStd,
}

impl CrossValidationSummary {
    pub fn from_reports(reports: &[MetricsReport]) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            folds: reports.len(),
            wa: col(|r| r.wa),
            ua: col(|r| r.ua),
            wf1: col(|r| r.wf1),
        }
    }
}

#[derive(Serialize)]
struct FoldRow {
    fold: usize,
    wa: f64,
    ua: f64,
    wf1: f64,
}

/// `fold,wa,ua,wf1` rows.
pub fn write_fold_metrics(path: impl AsRef<Path>, reports: &[MetricsReport]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for (fold, r) in reports.iter().enumerate() {
        w.serialize(FoldRow {
            fold,
            wa: r.wa,
            ua: r.ua,
            wf1: r.wf1,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Confusion matrix as CSV with a `true\pred` corner header.
pub fn write_confusion(path: impl AsRef<Path>, report: &MetricsReport, classes: &[String]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["true\\pred".to_string()];
    header.extend(classes.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in classes.iter().zip(&report.confusion) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_perfect() {
        let r = compute_metrics(&[vec![3, 0, 0], vec![0, 1, 0], vec![0, 0, 5]]).unwrap();
        assert_eq!((r.wa, r.ua, r.wf1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_by_two_hand_example() {
        let r = compute_metrics(&[vec![2, 0], vec![1, 1]]).unwrap();
        // class 0: P = 2/3, R = 1, F1 = 0.8; class 1: P = 1, R = 1/2, F1 = 2/3
        assert!((r.wa - 0.75).abs() < 1e-12);
        assert!((r.ua - 0.75).abs() < 1e-12);
        assert!((r.wf1 - (0.5 * 0.8 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((r.wf1 - 0.7333).abs() < 1e-4);
    }

    #[test]
    fn total_miss() {
        let r = compute_metrics(&[vec![0, 2], vec![2, 0]]).unwrap();
        assert_eq!((r.wa, r.ua, r.wf1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_support_excluded() {
        let r = compute_metrics(&[vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 0]]).unwrap();
        assert!((r.ua - 0.75).abs() < 1e-15);
        assert!(compute_metrics(&[vec![0, 0], vec![0, 0]]).is_err());
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
