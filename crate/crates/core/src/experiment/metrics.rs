use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K×K` counts, row = truth, column = prediction.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= classes || t >= classes {
            return Err(Error::InvalidInput(format!("class index {} outside 0..{classes}", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub region_id: String,
    pub variant: String,
    pub seed: u64,
    pub confusion: Vec<Vec<u64>>,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub overall_accuracy: f64,
    pub total: u64,
}

/// `2PR/(P+R)` with every 0/0 read as 0.
pub fn class_f1(confusion: &[Vec<u64>], k: usize) -> f64 {
    let tp = confusion[k][k] as f64;
    let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
    let actual: u64 = confusion[k].iter().sum();
    let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
    let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>, region_id: &str, variant: &str, seed: u64) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let per_class_f1: Vec<f64> = (0..k).map(|i| class_f1(&confusion, i)).collect();
        let macro_f1 = per_class_f1.iter().sum::<f64>() / k as f64;
        let overall_accuracy = if total == 0 { 0.0 } else { trace as f64 / total as f64 };
        Ok(Self {
            region_id: region_id.to_string(),
            variant: variant.to_string(),
            seed,
            confusion,
            per_class_f1,
            macro_f1,
            overall_accuracy,
            total,
        })
    }

    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        classes: usize,
        region_id: &str,
        variant: &str,
        seed: u64,
    ) -> Result<Self> {
        Self::from_confusion(confusion_matrix(predictions, labels, classes)?, region_id, variant, seed)
    }
}
