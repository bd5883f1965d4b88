//! Training objective: cross-entropy plus a weighted compactness term that
//! pushes the non-target logits toward each other.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// The combined objective of one clip. `total` stays on the tape so it can
/// be differentiated; the component values are plain numbers.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub cross_entropy: f64,
    pub compact_term: f64,
    pub lambda: f64,
}

/// Softmax over the logits with the target class removed, remaining class
/// order preserved. Pure value computation, no gradient.
pub fn non_target_distribution(logits: &Tensor, target: usize) -> Result<Tensor> {
    if logits.rank() != 1 {
        return Err(Error::Dimension {
            op: "non_target_distribution",
            lhs: logits.shape().to_vec(),
            rhs: vec![],
        });
    }
    let classes = logits.numel();
    if target >= classes {
        return Err(Error::ClassIndex { index: target, classes });
    }
    if classes < 2 {
        return Err(Error::contract(
            "non_target_distribution needs at least one non-target class",
        ));
    }
    let rest: Vec<f64> = logits
        .data()
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target)
        .map(|(_, &v)| v)
        .collect();
    let max = rest.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = rest.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::new(vec![classes - 1], exps.iter().map(|e| e / sum).collect())
}

/// Symmetric KL divergence between the non-target softmax and the uniform
/// distribution, evaluated term by term from the definition. Reference
/// implementation for the fused tape operation.
pub fn symmetric_uniform_kl(logits: &[f64], target: usize) -> f64 {
    let k = logits.len() - 1;
    let u = 1.0 / k as f64;
    let rest: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target)
        .map(|(_, &v)| v)
        .collect();
    let max = rest.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = rest.iter().map(|v| (v - max).exp()).sum();
    let p: Vec<f64> = rest.iter().map(|v| (v - max).exp() / sum).collect();
    let forward: f64 = p.iter().map(|&pc| u * (u / pc).ln()).sum();
    let reverse: f64 = p.iter().map(|&pc| pc * (pc / u).ln()).sum();
    forward + reverse
}

/// Cross-entropy plus `lambda` times the compactness term, recorded on the
/// tape as one differentiable scalar.
pub fn total_loss(
    tape: &mut Tape,
    logits: &Tensor,
    target: usize,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("lambda must be non-negative, got {lambda}")));
    }
    let ce = tape.cross_entropy(logits, target)?;
    let compact = tape.compact_term(logits, target)?;
    let weighted = tape.scale(&compact, lambda)?;
    let total = tape.add(&ce, &weighted)?;
    Ok(LossBreakdown {
        cross_entropy: ce.item(),
        compact_term: compact.item(),
        lambda,
        total,
    })
}
