//! Confusion matrix and mean intersection-over-union.

use crate::error::{invalid, Result};

/// Label value excluded from scoring.
pub const IGNORE_INDEX: u8 = 255;

/// `K x K` counts, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Adds one label map pair. Pixels labeled [`IGNORE_INDEX`] are skipped.
    pub fn update(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return invalid("confusion matrix", format!("{} labels vs {} predictions", gt.len(), pred.len()));
        }
        let k = self.num_classes;
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE_INDEX {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= k || p >= k {
                return invalid("confusion matrix", format!("label {g} or prediction {p} outside {k} classes"));
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return invalid("confusion matrix", "merging different class counts");
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class, `None` for classes absent from both labels and predictions.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over present classes.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return invalid("miou", "no scored pixels");
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.num_classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64)
    }
}
