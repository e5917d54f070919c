//! Confusion-matrix segmentation metrics: per-category IoU and F1, their
//! means, and overall accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[i * n + j]` = pixels with truth `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_counts(n: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n * n {
            return Err(Error::invalid(
                "confusion matrix",
                format!("{} counts for {n} categories", counts.len()),
            ));
        }
        Ok(Self { n, counts })
    }

    pub fn categories(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel pair per position. Pixels whose label equals `ignore`
    /// are skipped.
    pub fn accumulate(&mut self, pred: &[u8], label: &[u8], ignore: Option<usize>) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate",
                lhs: vec![pred.len()],
                rhs: vec![label.len()],
            });
        }
        // validate first so a bad map leaves the counts untouched
        for (&p, &t) in pred.iter().zip(label) {
            let (p, t) = (p as usize, t as usize);
            if Some(t) == ignore {
                continue;
            }
            for v in [p, t] {
                if v >= self.n {
                    return Err(Error::LabelOutOfRange {
                        label: v,
                        categories: self.n,
                    });
                }
            }
        }
        for (&p, &t) in pred.iter().zip(label) {
            if Some(t as usize) != ignore {
                self.counts[t as usize * self.n + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::invalid("merge", format!("{} vs {} categories", self.n, other.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn summarize(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("summarize", "no scored pixels"));
        }
        let n = self.n;
        let mut per_class = Vec::with_capacity(n);
        let (mut iou_sum, mut f1_sum, mut observed, mut trace) = (0.0, 0.0, 0usize, 0u64);
        for c in 0..n {
            let tp = self.get(c, c);
            let fn_: u64 = (0..n).filter(|&j| j != c).map(|j| self.get(c, j)).sum();
            let fp: u64 = (0..n).filter(|&i| i != c).map(|i| self.get(i, c)).sum();
            trace += tp;
            let union = tp + fp + fn_;
            if union == 0 {
                per_class.push(ClassMetrics { iou: None, f1: None });
                continue;
            }
            let iou = tp as f64 / union as f64;
            let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            iou_sum += iou;
            f1_sum += f1;
            observed += 1;
            per_class.push(ClassMetrics {
                iou: Some(iou),
                f1: Some(f1),
            });
        }
        Ok(Metrics {
            miou: iou_sum / observed as f64,
            oa: trace as f64 / total as f64,
            mf1: f1_sum / observed as f64,
            per_class,
        })
    }
}

/// IoU and F1 of one category; `None` when it never occurs in truth or
/// prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub iou: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub oa: f64,
    pub mf1: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// mIoU of always predicting the most frequent truth category.
pub fn majority_baseline(label_counts: &[u64]) -> Result<Metrics> {
    let n = label_counts.len();
    let majority = label_counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::invalid("majority_baseline", "no categories"))?;
    let mut counts = vec![0; n * n];
    for (t, &c) in label_counts.iter().enumerate() {
        counts[t * n + majority] = c;
    }
    ConfusionMatrix::from_counts(n, counts)?.summarize()
}
