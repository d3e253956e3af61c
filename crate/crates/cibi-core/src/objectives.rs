//! Loss functions, written as pure functions over plain slices so they can
//! be checked independently of the network code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_sigmoid;

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - m - z).collect()
}

/// Cross entropy of a softmax over `logits` against a one-hot target:
/// `logsumexp(logits) - logits[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyInput {
            what: "logits".into(),
        });
    }
    if target >= logits.len() {
        return Err(Error::AnswerOutOfRange {
            index: target,
            count: logits.len(),
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// Debiased score fusion: `H(a, b) = ln σ(a - b)` elementwise.
pub fn fusion_h(f_vqa: &[f64], f_qa: &[f64]) -> Result<Vec<f64>> {
    if f_vqa.len() != f_qa.len() {
        return Err(Error::Shape {
            what: "fusion operands".into(),
            expected: f_vqa.len(),
            found: f_qa.len(),
        });
    }
    Ok(f_vqa
        .iter()
        .zip(f_qa)
        .map(|(a, b)| log_sigmoid(a - b))
        .collect())
}

/// Loss of the question-only branch: cross entropy of a softmax over its
/// sigmoid scores.
pub fn qa_loss(scores: &[f64], target: usize) -> Result<f64> {
    cross_entropy(scores, target)
}

/// Cross entropy over the fused, debiased scores.
pub fn debiased_vqa_loss(f_vqa: &[f64], f_qa: &[f64], target: usize) -> Result<f64> {
    cross_entropy(&fusion_h(f_vqa, f_qa)?, target)
}

/// Contrastive loss for one anchor embedding. The denominator runs over the
/// fused embeddings of every original in-batch sample (anchor included);
/// positives appear only in the numerator. All similarities are cosine,
/// scaled by `1/tau`.
pub fn info_nce(
    anchor: &[f64],
    positives: &[Vec<f64>],
    batch: &[Vec<f64>],
    tau: f64,
) -> Result<f64> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config("tau", format!("must be positive, got {tau}")));
    }
    if batch.len() < 2 {
        return Err(Error::InsufficientNegatives { batch: batch.len() });
    }
    if positives.is_empty() {
        return Err(Error::EmptyInput {
            what: "positive set".into(),
        });
    }
    let cos = |a: &[f64], b: &[f64]| -> Result<f64> {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return Err(Error::DegenerateSimilarity);
        }
        Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
    };
    let sims: Vec<f64> = batch
        .iter()
        .map(|b| cos(anchor, b).map(|s| s / tau))
        .collect::<Result<_>>()?;
    let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + sims.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    let mut total = 0.0;
    for p in positives {
        total += lse - cos(anchor, p)? / tau;
    }
    Ok(total / positives.len() as f64)
}

/// Weighted combination of the three training terms.
pub fn total_loss(contrastive: f64, debiased_vqa: f64, question_only: f64, lambda: f64) -> f64 {
    lambda * contrastive + debiased_vqa + question_only
}

/// One batch's loss terms, before and after weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub debiased_vqa: f64,
    pub question_only: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(contrastive: f64, debiased_vqa: f64, question_only: f64, lambda: f64) -> Self {
        LossBreakdown {
            contrastive,
            debiased_vqa,
            question_only,
            total: total_loss(contrastive, debiased_vqa, question_only, lambda),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.contrastive.is_finite()
            && self.debiased_vqa.is_finite()
            && self.question_only.is_finite()
            && self.total.is_finite()
    }
}
