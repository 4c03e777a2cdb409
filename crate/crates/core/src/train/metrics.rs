use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Scored pixels seen so far.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds a batch of pixels; ground-truth pixels equal to `ignore_index` are skipped.
    pub fn update(&mut self, truth: &[u8], pred: &[u8], ignore_index: u8) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Contract(format!(
                "confusion update: {} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let k = self.num_classes;
        for (&t, &p) in truth.iter().zip(pred) {
            if t == ignore_index {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::Contract(format!(
                    "confusion update: class pair ({t}, {p}) outside {k} classes"
                )));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` for a class absent from both
    /// ground truth and predictions.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let k = self.num_classes;
        let tp = self.get(class, class);
        let row: u64 = (0..k).map(|p| self.get(class, p)).sum();
        let col: u64 = (0..k).map(|t| self.get(t, class)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn report(&self) -> Result<MiouReport> {
        let per_class: Vec<Option<f64>> = (0..self.num_classes).map(|c| self.iou(c)).collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Contract("mIoU undefined: no scored pixels".into()));
        }
        Ok(MiouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
            confusion: self.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// Mean over classes whose IoU is defined.
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}
