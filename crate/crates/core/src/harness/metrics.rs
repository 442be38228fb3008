//! Confusion matrix and IoU.

use crate::error::{Error, Result};
use crate::image::IGNORE_LABEL;
use serde::{Deserialize, Serialize};

/// `Cls × Cls` pixel counts, rows indexed by ground truth, columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    /// Adds one labelling; pixels whose truth is 255 are skipped.
    pub fn update(&mut self, predicted: &[u8], truth: &[u8]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::InvalidInput(format!("{} predictions for {} labels", predicted.len(), truth.len())));
        }
        let n = self.num_classes;
        for (&p, &t) in predicted.iter().zip(truth) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= n || p as usize >= n {
                return Err(Error::InvalidInput(format!(
                    "class id out of range: truth {t}, prediction {p}, {n} classes"
                )));
            }
            self.counts[t as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "merging confusion matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Number of non-ignored pixels seen.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP/(TP+FP+FN)` per class; `None` for a class absent from both truth
    /// and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..n).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over the classes that occur; `None` if none do.
    pub fn miou(&self) -> Option<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }
}
