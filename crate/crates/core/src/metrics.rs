//! Confusion-matrix segmentation metrics.

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// `C x C` counts, rows indexed by ground truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.len() != truth.len() || pred.height() != truth.height() {
            return Err(Error::shape(
                "confusion",
                format!("{}x{} vs {}x{}", pred.height(), pred.width(), truth.height(), truth.width()),
            ));
        }
        for (p, t) in pred.targets().zip(truth.targets()) {
            if p >= self.classes || t >= self.classes {
                return Err(Error::invalid(format!("class index {} >= {}", p.max(t), self.classes)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub pixel_accuracy: f64,
    /// `M_cc / (row_c + col_c - M_cc)`, 0 when the denominator is 0.
    pub iou: Vec<f64>,
    /// Classes occurring in the ground truth.
    pub present: Vec<bool>,
    /// Mean IoU over present classes.
    pub mean_iou: f64,
    pub confusion: ConfusionMatrix,
}

impl SegMetrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::invalid("metrics over zero pixels"));
        }
        let c = confusion.classes();
        let trace: u64 = (0..c).map(|i| confusion.get(i, i)).sum();
        let mut iou = Vec::with_capacity(c);
        let mut present = Vec::with_capacity(c);
        for k in 0..c {
            let m = confusion.get(k, k);
            let union = confusion.row_sum(k) + confusion.col_sum(k) - m;
            iou.push(if union == 0 { 0.0 } else { m as f64 / union as f64 });
            present.push(confusion.row_sum(k) > 0);
        }
        let n_present = present.iter().filter(|&&p| p).count();
        let mean_iou = iou.iter().zip(&present).filter(|(_, &p)| p).map(|(v, _)| v).sum::<f64>() / n_present as f64;
        Ok(Self {
            pixel_accuracy: trace as f64 / total as f64,
            iou,
            present,
            mean_iou,
            confusion,
        })
    }

    /// Pools the confusion over all `(prediction, truth)` pairs.
    pub fn from_pairs<'a>(classes: usize, pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>) -> Result<Self> {
        let mut m = ConfusionMatrix::new(classes);
        let mut any = false;
        for (p, t) in pairs {
            m.add(p, t)?;
            any = true;
        }
        if !any {
            return Err(Error::invalid("empty test set"));
        }
        Self::from_confusion(m)
    }
}
