//! Recall-based evaluation: per-class recall, its unweighted mean (UAR),
//! and overall accuracy (WAR).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Recall of each class; 0.0 for classes with no samples (those are
    /// listed in `zero_support_classes` and excluded from `uar`).
    pub per_class_recall: Vec<f64>,
    /// Unweighted mean recall over classes that appear in the labels.
    pub uar: f64,
    /// Overall accuracy.
    pub war: f64,
    /// `confusion[label][prediction]` sample counts.
    pub confusion: Vec<Vec<u64>>,
    pub zero_support_classes: Vec<usize>,
}

/// Counts a confusion matrix and derives the recall metrics.
pub fn evaluate(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "evaluate got {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("evaluate needs at least one sample"));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&pred, &label) in predictions.iter().zip(labels) {
        for index in [pred, label] {
            if index >= num_classes {
                return Err(Error::ClassIndex { index, classes: num_classes });
            }
        }
        confusion[label][pred] += 1;
    }

    let mut per_class_recall = vec![0.0; num_classes];
    let mut zero_support_classes = Vec::new();
    let mut recall_sum = 0.0;
    let mut hits = 0u64;
    for c in 0..num_classes {
        let support: u64 = confusion[c].iter().sum();
        hits += confusion[c][c];
        if support == 0 {
            zero_support_classes.push(c);
        } else {
            per_class_recall[c] = confusion[c][c] as f64 / support as f64;
            recall_sum += per_class_recall[c];
        }
    }
    let supported = num_classes - zero_support_classes.len();
    Ok(Metrics {
        per_class_recall,
        uar: recall_sum / supported as f64,
        war: hits as f64 / labels.len() as f64,
        confusion,
        zero_support_classes,
    })
}

/// Ratio of the mean pairwise distance between embeddings of different
/// classes to the mean pairwise distance within classes. Larger means the
/// classes form tighter, better separated clusters.
pub fn cls_distance_ratio(embeddings: &[Tensor], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::contract(format!(
            "cls_distance_ratio got {} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let mut inter = (0.0, 0u64);
    let mut intra = (0.0, 0u64);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            if embeddings[i].numel() != embeddings[j].numel() {
                return Err(Error::Dimension {
                    op: "cls_distance_ratio",
                    lhs: embeddings[i].shape().to_vec(),
                    rhs: embeddings[j].shape().to_vec(),
                });
            }
            let dist = embeddings[i]
                .data()
                .iter()
                .zip(embeddings[j].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let bucket = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            bucket.0 += dist;
            bucket.1 += 1;
        }
    }
    if inter.1 == 0 || intra.1 == 0 {
        return Err(Error::contract(
            "cls_distance_ratio needs at least two classes and two samples per class",
        ));
    }
    Ok((inter.0 / inter.1 as f64) / (intra.0 / intra.1 as f64))
}
