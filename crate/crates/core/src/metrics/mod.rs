//! Hard-label segmentation metrics and the statistics used to compare losses.

mod wilcoxon;

pub use wilcoxon::{wilcoxon_rank_sum, wilcoxon_rank_sum_exact, wilcoxon_rank_sum_normal};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Labels, OneHotMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Per-class confusion counts over the same set of elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.classes
            .first()
            .map(|c| c.tp + c.fp + c.fn_ + c.tn)
            .unwrap_or(0)
    }

    /// Accumulates counts of another disjoint set of elements.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl ClassMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Dsc => self.dsc,
            Metric::Iou => self.iou,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub classes: Vec<ClassMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dsc,
    Iou,
    Precision,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Dsc, Metric::Iou, Metric::Precision, Metric::Recall];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::Iou => "iou",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
        }
    }
}

/// Counts from hard one-hot prediction and truth of identical shape.
pub fn confusion(pred: &OneHotMask, truth: &OneHotMask) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            expected: truth.shape().to_vec(),
            found: pred.shape().to_vec(),
        });
    }
    Ok(confusion_from_labels(
        pred.labels(),
        truth.labels(),
        truth.classes(),
    ))
}

/// Same as [`confusion`] on label maps.
pub fn confusion_labels(pred: &Labels, truth: &Labels, classes: usize) -> Result<ConfusionCounts> {
    if pred.shape != truth.shape {
        return Err(Error::Shape {
            expected: truth.shape.clone(),
            found: pred.shape.clone(),
        });
    }
    Ok(confusion_from_labels(
        pred.data.iter().copied(),
        truth.data.iter().copied(),
        classes,
    ))
}

pub(crate) fn confusion_from_labels(
    pred: impl Iterator<Item = usize>,
    truth: impl Iterator<Item = usize>,
    classes: usize,
) -> ConfusionCounts {
    let mut counts = vec![ClassCounts::default(); classes];
    let mut total = 0u64;
    for (p, t) in pred.zip(truth) {
        total += 1;
        if p == t {
            counts[p].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[t].fn_ += 1;
        }
    }
    for c in counts.iter_mut() {
        c.tn = total - c.tp - c.fp - c.fn_;
    }
    ConfusionCounts { classes: counts }
}

/// A class with no true, predicted or missed elements scores 1 on every
/// metric; otherwise a zero denominator scores 0.
pub fn class_metrics(c: &ClassCounts) -> ClassMetrics {
    if c.tp + c.fp + c.fn_ == 0 {
        return ClassMetrics {
            dsc: 1.0,
            iou: 1.0,
            precision: 1.0,
            recall: 1.0,
        };
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    ClassMetrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
    }
}

pub fn compute_metrics(counts: &ConfusionCounts) -> SegMetrics {
    SegMetrics {
        classes: counts.classes.iter().map(class_metrics).collect(),
    }
}

/// Mean and 95% normal half-width `1.96 * s / sqrt(n)` with the `n - 1` standard deviation.
pub fn mean_ci(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid(
            "values",
            format!("need at least 2 values for a confidence interval, got {n}"),
        ));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// One CSV row of per-class metrics: `dataset,loss,seed,class,dsc,iou,precision,recall`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub loss: String,
    pub seed: u64,
    pub class: usize,
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

pub const METRICS_CSV_HEADER: &str = "dataset,loss,seed,class,dsc,iou,precision,recall";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.dataset, self.loss, self.seed, self.class, self.dsc, self.iou, self.precision, self.recall
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::one_hot;
    use proptest::prelude::*;

    fn mask(labels: &[usize], c: usize) -> OneHotMask {
        one_hot(&Labels::new(vec![labels.len()], labels.to_vec()).unwrap(), c).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let pred = mask(&[1, 1, 0, 0], 2);
        let truth = mask(&[1, 0, 1, 0], 2);
        let c = confusion(&pred, &truth).unwrap().classes[1];
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));

        let same = confusion(&truth, &truth).unwrap();
        assert!(same.classes.iter().all(|c| c.fp == 0 && c.fn_ == 0));

        let comp = confusion(&mask(&[0, 1, 0, 1], 2), &truth).unwrap();
        assert!(comp.classes.iter().all(|c| c.tp == 0 && c.tn == 0));

        assert!(confusion(&mask(&[0, 1], 2), &truth).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = class_metrics(&ClassCounts { tp: 6, fp: 2, fn_: 2, tn: 0 });
        assert!((m.dsc - 0.75).abs() < 1e-15);
        assert!((m.iou - 0.6).abs() < 1e-15);
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.recall - 0.75).abs() < 1e-15);
        let m = class_metrics(&ClassCounts { tp: 0, fp: 0, fn_: 0, tn: 9 });
        assert_eq!((m.dsc, m.iou, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
        let m = class_metrics(&ClassCounts { tp: 0, fp: 0, fn_: 3, tn: 9 });
        assert_eq!((m.dsc, m.precision, m.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mean_ci_examples() {
        assert_eq!(mean_ci(&[1.0, 1.0, 1.0, 1.0]).unwrap(), (1.0, 0.0));
        let (m, h) = mean_ci(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((h - 0.98).abs() < 1e-12);
        assert!(mean_ci(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn self_confusion_is_perfect(labels in prop::collection::vec(0usize..3, 1..100)) {
            let m = mask(&labels, 3);
            let metrics = compute_metrics(&confusion(&m, &m).unwrap());
            for c in metrics.classes {
                prop_assert_eq!((c.dsc, c.iou, c.precision, c.recall), (1.0, 1.0, 1.0, 1.0));
            }
        }

        #[test]
        fn dsc_dominates_iou(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
            let m = class_metrics(&ClassCounts { tp, fp, fn_, tn: 0 });
            prop_assert!(m.dsc >= m.iou);
            if m.dsc == m.iou {
                prop_assert!(m.dsc == 0.0 || m.dsc == 1.0);
            }
            prop_assert!((m.iou - m.dsc / (2.0 - m.dsc)).abs() < 1e-12);
        }

        #[test]
        fn totals_agree_across_classes(
            pred in prop::collection::vec(0usize..3, 40),
            truth in prop::collection::vec(0usize..3, 40),
        ) {
            let c = confusion(&mask(&pred, 3), &mask(&truth, 3)).unwrap();
            for k in &c.classes {
                prop_assert_eq!(k.tp + k.fp + k.fn_ + k.tn, 40);
            }
        }
    }
}
