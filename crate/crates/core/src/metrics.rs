//! Evaluation: top-1 accuracy, mean IoU, and softened-probability
//! histograms for teacher/student diagnostics.

use serde::{Deserialize, Serialize};

use crate::data::{ClassificationDataset, SegmentationGridDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::softmax_slice;
use crate::model::{forward_grid_logits, forward_logits, ModelParams};

/// Argmax with ties broken toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax logit matches the label.
pub fn evaluate_top1(params: &ModelParams, ds: &ClassificationDataset) -> Result<f64> {
    let mut correct = 0usize;
    let classes = ds.class_count;
    for chunk in (0..ds.n).collect::<Vec<_>>().chunks(256) {
        let graph = Graph::new();
        let (x, labels) = ds.batch(chunk);
        let logits = forward_logits(&graph, params, &x)?;
        let lv = logits.values();
        for (i, &y) in labels.iter().enumerate() {
            if argmax(&lv[i * classes..(i + 1) * classes]) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.n as f64)
}

/// Accuracy of raw logit rows against labels; shared by tests and tools.
pub fn top1_from_logits(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&logits[i * classes..(i + 1) * classes]) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Confusion matrix [pred * classes + truth] counts.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], classes: usize) -> Vec<u64> {
    assert_eq!(pred.len(), truth.len());
    let mut m = vec![0u64; classes * classes];
    for (&p, &t) in pred.iter().zip(truth) {
        m[p * classes + t] += 1;
    }
    m
}

/// Mean IoU over classes present in prediction or ground truth.
pub fn miou_from_confusion(confusion: &[u64], classes: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        let tp = confusion[c * classes + c];
        let fp: u64 = (0..classes)
            .filter(|&t| t != c)
            .map(|t| confusion[c * classes + t])
            .sum();
        let fn_: u64 = (0..classes)
            .filter(|&p| p != c)
            .map(|p| confusion[p * classes + c])
            .sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            continue; // class absent from both sides
        }
        total += tp as f64 / denom as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Contract("no classes present in either side".into()));
    }
    Ok(total / counted as f64)
}

/// Mean IoU of per-cell predictions over the whole split.
pub fn evaluate_miou(params: &ModelParams, ds: &SegmentationGridDataset) -> Result<f64> {
    let classes = ds.class_count;
    let cells = ds.height * ds.width;
    let mut confusion = vec![0u64; classes * classes];
    for i in 0..ds.n {
        let graph = Graph::new();
        let (x, labels) = ds.batch(&[i]);
        let logits = forward_grid_logits(&graph, params, &x)?;
        let lv = logits.values();
        for cell in 0..cells {
            let row: Vec<f64> = (0..classes).map(|c| lv[c * cells + cell]).collect();
            confusion[argmax(&row) * classes + labels[cell]] += 1;
        }
    }
    miou_from_confusion(&confusion, classes)
}

/// Binned softened output probabilities, ground-truth class separated
/// from the rest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HistogramReport {
    pub tau: f64,
    pub bins: usize,
    pub teacher_positive: Vec<u64>,
    pub teacher_negative: Vec<u64>,
    pub student_positive: Vec<u64>,
    pub student_negative: Vec<u64>,
}

impl HistogramReport {
    fn bin(&self, p: f64) -> usize {
        // top value clips into the last bin
        ((p * self.bins as f64) as usize).min(self.bins - 1)
    }
}

/// Softened probability histograms of teacher and student on a dataset.
pub fn probability_histograms(
    teacher: &ModelParams,
    student: &ModelParams,
    ds: &ClassificationDataset,
    tau: f64,
    bins: usize,
) -> Result<HistogramReport> {
    if bins == 0 {
        return Err(Error::invalid("bins", "must be positive"));
    }
    let mut report = HistogramReport {
        tau,
        bins,
        teacher_positive: vec![0; bins],
        teacher_negative: vec![0; bins],
        student_positive: vec![0; bins],
        student_negative: vec![0; bins],
    };
    let classes = ds.class_count;
    for chunk in (0..ds.n).collect::<Vec<_>>().chunks(256) {
        let graph = Graph::new();
        let (x, labels) = ds.batch(chunk);
        let t_logits = forward_logits(&graph, teacher, &x)?;
        let s_logits = forward_logits(&graph, student, &x)?;
        let tv = t_logits.values();
        let sv = s_logits.values();
        for (i, &y) in labels.iter().enumerate() {
            let tp = softmax_slice(&tv[i * classes..(i + 1) * classes], tau);
            let sp = softmax_slice(&sv[i * classes..(i + 1) * classes], tau);
            for c in 0..classes {
                let (t_bin, s_bin) = (report.bin(tp[c]), report.bin(sp[c]));
                if c == y {
                    report.teacher_positive[t_bin] += 1;
                    report.student_positive[s_bin] += 1;
                } else {
                    report.teacher_negative[t_bin] += 1;
                    report.student_negative[s_bin] += 1;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_mixture, MixtureSpec};
    use crate::model::{init_params, MlpSpec};

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn perfect_logits_score_one() {
        let labels = vec![0, 1, 2];
        let mut logits = vec![0.0; 9];
        for (i, &y) in labels.iter().enumerate() {
            logits[i * 3 + y] = 10.0;
        }
        assert_eq!(top1_from_logits(&logits, &labels, 3), 1.0);
    }

    #[test]
    fn all_zero_logits_balanced_labels_hit_class_zero_frequency() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let logits = vec![0.0; 1000];
        assert_eq!(top1_from_logits(&logits, &labels, 10), 0.1);
    }

    #[test]
    fn miou_perfect_prediction_is_one() {
        let truth = vec![0, 1, 2, 1, 0];
        let m = confusion_matrix(&truth, &truth, 3);
        assert_eq!(miou_from_confusion(&m, 3).unwrap(), 1.0);
    }

    #[test]
    fn miou_all_background_against_half_split() {
        // prediction all class 0, GT half 0 / half 1:
        // IoU(0) = 0.5, IoU(1) = 0 -> mean 0.25
        let truth: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let pred = vec![0usize; 100];
        let m = confusion_matrix(&pred, &truth, 3);
        assert_eq!(miou_from_confusion(&m, 3).unwrap(), 0.25);
    }

    #[test]
    fn miou_disjoint_classes_is_zero() {
        let truth = vec![0usize; 10];
        let pred = vec![1usize; 10];
        let m = confusion_matrix(&pred, &truth, 2);
        assert_eq!(miou_from_confusion(&m, 2).unwrap(), 0.0);
    }

    #[test]
    fn histograms_count_every_probability_once() {
        let ds = gen_gaussian_mixture(&MixtureSpec {
            classes: 4,
            dim: 6,
            n_per_class: 10,
            ..MixtureSpec::default()
        })
        .unwrap();
        let teacher = init_params(&MlpSpec::new(vec![6, 8, 4], 0).unwrap()).unwrap();
        let student = init_params(&MlpSpec::new(vec![6, 4], 1).unwrap()).unwrap();
        let rep = probability_histograms(&teacher, &student, &ds, 4.0, 64).unwrap();
        let pos: u64 = rep.teacher_positive.iter().sum();
        let neg: u64 = rep.teacher_negative.iter().sum();
        assert_eq!(pos, ds.n as u64);
        assert_eq!(neg, (ds.n * 3) as u64);
    }
}
