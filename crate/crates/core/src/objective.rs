//! Losses, the inference-time score combination and decision-level voting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::tensor::{argmax, Float};

/// `λ` balancing the two single-modality head losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config(
                "train.lambda",
                format!("{lambda} is outside [0, 1]"),
            ));
        }
        Ok(Self { lambda })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.6 }
    }
}

/// Scalar loss nodes of one forward pass. Absent terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub cf: Option<Var>,
    pub if_: Option<Var>,
    pub cls: Option<Var>,
    pub total: Var,
}

pub fn cross_entropy<T: Float>(g: &mut Graph<T>, logits: Var, label: usize) -> Result<Var> {
    g.cross_entropy(logits, label)
}

/// `λ·l_cf + (1−λ)·l_if + l_cls`.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    l_cf: Var,
    l_if: Var,
    l_cls: Var,
    w: LossWeights,
) -> Result<Var> {
    let w = LossWeights::new(w.lambda)?;
    g.weighted_sum(&[
        (l_cf, T::of(w.lambda)),
        (l_if, T::of(1.0 - w.lambda)),
        (l_cls, T::one()),
    ])
}

/// `(logits_cf + logits_if)/2 + logits_cls`, argmax with lowest-index ties.
pub fn combine_inference<T: Float>(
    logits_cf: &[T],
    logits_if: &[T],
    logits_cls: &[T],
) -> Result<usize> {
    Ok(argmax(&combined_scores(logits_cf, logits_if, logits_cls)?))
}

pub fn combined_scores<T: Float>(
    logits_cf: &[T],
    logits_if: &[T],
    logits_cls: &[T],
) -> Result<Vec<T>> {
    let k = logits_cls.len();
    for other in [logits_cf.len(), logits_if.len()] {
        if other != k {
            return Err(Error::LengthMismatch {
                what: "combine_inference",
                left: other,
                right: k,
            });
        }
    }
    let half = T::of(0.5);
    Ok((0..k)
        .map(|i| (logits_cf[i] + logits_if[i]) * half + logits_cls[i])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingRule {
    Max,
    Average,
}

/// Decision-level fusion of two per-modality probability vectors.
pub fn voting_fuse<T: Float>(prob_cf: &[T], prob_if: &[T], rule: VotingRule) -> Result<usize> {
    if prob_cf.len() != prob_if.len() {
        return Err(Error::LengthMismatch {
            what: "voting_fuse",
            left: prob_cf.len(),
            right: prob_if.len(),
        });
    }
    for p in [prob_cf, prob_if] {
        let sum: f64 = p.iter().map(|x| x.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&x| x < T::zero()) {
            return Err(Error::NotProbability { sum });
        }
    }
    let fused: Vec<T> = prob_cf
        .iter()
        .zip(prob_if)
        .map(|(&a, &b)| match rule {
            VotingRule::Max => a.max(b),
            VotingRule::Average => (a + b) * T::of(0.5),
        })
        .collect();
    Ok(argmax(&fused))
}

/// Softmax of a logit vector.
pub fn probabilities<T: Float>(logits: &[T]) -> Vec<T> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}
