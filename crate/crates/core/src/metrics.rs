//! Classification metrics with macro averages over the labels that actually
//! occur in the ground truth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions but {truth} truth labels")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("no samples to score")]
    Empty,
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub balanced_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_label_precision: Vec<f64>,
    pub per_label_recall: Vec<f64>,
    pub per_label_f1: Vec<f64>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    /// Labels with at least one true sample; the macro averages run over these.
    pub evaluated_labels: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(predictions: &[usize], truth: &[usize], num_labels: usize) -> Result<Metrics, MetricsError> {
    if predictions.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&label) = predictions.iter().chain(truth).find(|&&l| l >= num_labels) {
        return Err(MetricsError::LabelOutOfRange { label, num_labels });
    }
    let mut confusion = vec![vec![0u64; num_labels]; num_labels];
    for (&p, &t) in predictions.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let mut precision = vec![0.0; num_labels];
    let mut recall = vec![0.0; num_labels];
    let mut f1 = vec![0.0; num_labels];
    for l in 0..num_labels {
        let tp = confusion[l][l];
        let actual: u64 = confusion[l].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[l]).sum();
        precision[l] = ratio(tp, predicted);
        recall[l] = ratio(tp, actual);
        let s = precision[l] + recall[l];
        f1[l] = if s > 0.0 { 2.0 * precision[l] * recall[l] / s } else { 0.0 };
    }
    let evaluated: Vec<usize> = (0..num_labels)
        .filter(|&l| confusion[l].iter().sum::<u64>() > 0)
        .collect();
    let mean_over = |v: &[f64]| evaluated.iter().map(|&l| v[l]).sum::<f64>() / evaluated.len() as f64;
    let macro_recall = mean_over(&recall);
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(Metrics {
        balanced_accuracy: macro_recall,
        macro_precision: mean_over(&precision),
        macro_recall,
        macro_f1: mean_over(&f1),
        accuracy: hits as f64 / truth.len() as f64,
        per_label_precision: precision,
        per_label_recall: recall,
        per_label_f1: f1,
        confusion,
        evaluated_labels: evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let m = compute_metrics(&y, &y, 3).unwrap();
        assert_eq!(m.balanced_accuracy, 1.0);
        assert_eq!(m.macro_precision, 1.0);
        assert_eq!(m.macro_recall, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn balanced_accuracy_is_mean_recall() {
        // label 0 fully recalled, label 1 half recalled
        let truth = [0, 0, 1, 1];
        let pred = [0, 0, 1, 0];
        let m = compute_metrics(&pred, &truth, 2).unwrap();
        assert_eq!(m.per_label_recall, vec![1.0, 0.5]);
        assert_eq!(m.balanced_accuracy, 0.75);
        assert!((m.per_label_precision[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_label_precision[1], 1.0);
    }

    #[test]
    fn absent_labels_are_excluded_from_macro_averages() {
        let truth = [0, 1, 0, 1];
        let pred = [0, 1, 0, 1];
        let m = compute_metrics(&pred, &truth, 8).unwrap();
        assert_eq!(m.evaluated_labels, vec![0, 1]);
        assert_eq!(m.balanced_accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn zero_over_zero_precision_is_zero() {
        let m = compute_metrics(&[0, 0], &[0, 1], 2).unwrap();
        assert_eq!(m.per_label_precision[1], 0.0);
        assert_eq!(m.per_label_f1[1], 0.0);
    }

    #[test]
    fn out_of_range_label() {
        assert_eq!(
            compute_metrics(&[3], &[0], 2),
            Err(MetricsError::LabelOutOfRange { label: 3, num_labels: 2 })
        );
    }

    proptest! {
        #[test]
        fn bounds_and_confusion_rows(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..60)) {
            let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let m = compute_metrics(&pred, &truth, 5).unwrap();
            for v in [m.balanced_accuracy, m.macro_precision, m.macro_recall, m.macro_f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            for l in 0..5 {
                let count = truth.iter().filter(|&&t| t == l).count() as u64;
                prop_assert_eq!(m.confusion[l].iter().sum::<u64>(), count);
                let (p, r) = (m.per_label_precision[l], m.per_label_recall[l]);
                let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
                prop_assert!((m.per_label_f1[l] - f).abs() < 1e-15);
            }
        }
    }
}
