//! Validation-weighted soft voting over member probability outputs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::checkpoint::CheckpointMeta;
use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("member {index} has non-positive validation score {score}")]
    NonPositiveScore { index: usize, score: f64 },
    #[error("no members")]
    Empty,
    #[error("member {index} shape {got:?} differs from {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("member {index} row {row} is not a probability vector (sum {sum})")]
    NotProbabilities { index: usize, row: usize, sum: f64 },
    #[error("member counts differ: {probs} probability matrices, {weights} weights")]
    CountMismatch { probs: usize, weights: usize },
    #[error("checkpoint {0} is missing the {1} validation metric")]
    MissingMetric(PathBuf, WeightMetric),
}

/// Which validation metric sets the voting weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMetric {
    F1,
    Acc,
    Auc,
}

impl std::fmt::Display for WeightMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightMetric::F1 => "f1",
            WeightMetric::Acc => "acc",
            WeightMetric::Auc => "auc",
        })
    }
}

impl WeightMetric {
    pub fn from_meta(&self, meta: &CheckpointMeta) -> Option<f64> {
        match self {
            WeightMetric::F1 => meta.val_f1,
            WeightMetric::Acc => meta.val_acc,
            WeightMetric::Auc => meta.val_auc,
        }
    }
}

/// Ensemble definition file: checkpoint paths plus the weighting metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<PathBuf>,
    pub metric: WeightMetric,
}

/// Voting weights proportional to the members' validation scores.
pub fn compute_weights(val_scores: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    if val_scores.is_empty() {
        return Err(EnsembleError::Empty);
    }
    for (index, &score) in val_scores.iter().enumerate() {
        if score <= 0.0 || !score.is_finite() {
            return Err(EnsembleError::NonPositiveScore { index, score });
        }
    }
    let sum: f64 = val_scores.iter().sum();
    Ok(val_scores.iter().map(|s| s / sum).collect())
}

/// Weighted elementwise average of member probability matrices `[B, C]`.
/// All members must be evaluated on the same ordered batch.
pub fn soft_vote(member_probs: &[Tensor], weights: &[f64]) -> Result<Tensor, EnsembleError> {
    if member_probs.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if member_probs.len() != weights.len() {
        return Err(EnsembleError::CountMismatch {
            probs: member_probs.len(),
            weights: weights.len(),
        });
    }
    let shape = member_probs[0].shape().to_vec();
    let rows = shape.first().copied().unwrap_or(0);
    let cols = shape.get(1).copied().unwrap_or(0);
    for (index, probs) in member_probs.iter().enumerate() {
        if probs.shape() != shape.as_slice() {
            return Err(EnsembleError::ShapeMismatch {
                index,
                expected: shape.clone(),
                got: probs.shape().to_vec(),
            });
        }
        for row in 0..rows {
            let sum: f64 = probs.data()[row * cols..(row + 1) * cols].iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(EnsembleError::NotProbabilities { index, row, sum });
            }
        }
    }
    let mut out = Tensor::zeros(&shape);
    for (probs, &w) in member_probs.iter().zip(weights) {
        for (o, &p) in out.data_mut().iter_mut().zip(probs.data()) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// Threshold the positive-class probability; the boundary counts as
/// positive.
pub fn decide(probs: &Tensor, threshold: f64) -> Vec<usize> {
    let cols = probs.shape().get(1).copied().unwrap_or(2);
    (0..probs.shape()[0])
        .map(|row| usize::from(probs.data()[row * cols + 1] >= threshold))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[[f64; 2]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_data(&[rows.len(), 2], data).unwrap()
    }

    #[test]
    fn equal_scores_split_evenly() {
        let w = compute_weights(&[0.9, 0.9, 0.9, 0.9]).unwrap();
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn weights_are_proportional_and_normalized() {
        let w = compute_weights(&[0.8, 0.4]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
        for scores in [[0.3, 0.9], [0.5, 0.01], [1.0, 1.0]] {
            let w = compute_weights(&scores).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_positive_scores_rejected() {
        assert!(matches!(
            compute_weights(&[0.5, 0.0]),
            Err(EnsembleError::NonPositiveScore { index: 1, .. })
        ));
        assert!(matches!(
            compute_weights(&[-0.2]),
            Err(EnsembleError::NonPositiveScore { index: 0, .. })
        ));
    }

    #[test]
    fn identical_members_are_a_fixed_point() {
        let a = probs(&[[0.6, 0.4], [0.2, 0.8]]);
        let out = soft_vote(&[a.clone(), a.clone(), a.clone()], &[0.5, 0.25, 0.25]).unwrap();
        for (x, y) in out.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_weights_select_a_member() {
        let a = probs(&[[0.6, 0.4]]);
        let b = probs(&[[0.1, 0.9]]);
        let out = soft_vote(&[a, b.clone()], &[0.0, 1.0]).unwrap();
        assert_eq!(out.data(), b.data());
    }

    #[test]
    fn averaging_arithmetic() {
        let a = probs(&[[0.6, 0.4]]);
        let b = probs(&[[0.2, 0.8]]);
        let out = soft_vote(&[a, b], &[0.5, 0.5]).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-12);
        assert!((out.data()[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn vote_output_rows_stay_probabilities_and_bounded_by_members() {
        let a = probs(&[[0.9, 0.1], [0.3, 0.7]]);
        let b = probs(&[[0.5, 0.5], [0.1, 0.9]]);
        let w = compute_weights(&[0.7, 0.3]).unwrap();
        let out = soft_vote(&[a.clone(), b.clone()], &w).unwrap();
        for row in 0..2 {
            let sum: f64 = out.data()[row * 2..(row + 1) * 2].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let p1 = out.data()[row * 2 + 1];
            let lo = a.data()[row * 2 + 1].min(b.data()[row * 2 + 1]);
            let hi = a.data()[row * 2 + 1].max(b.data()[row * 2 + 1]);
            assert!(p1 >= lo - 1e-12 && p1 <= hi + 1e-12);
        }
    }

    #[test]
    fn permuting_members_with_weights_changes_nothing() {
        let a = probs(&[[0.8, 0.2]]);
        let b = probs(&[[0.4, 0.6]]);
        let c = probs(&[[0.5, 0.5]]);
        let w = [0.5, 0.3, 0.2];
        let x = soft_vote(&[a.clone(), b.clone(), c.clone()], &w).unwrap();
        let y = soft_vote(&[c, a, b], &[0.2, 0.5, 0.3]).unwrap();
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_and_probability_validation() {
        let a = probs(&[[0.6, 0.4]]);
        let b = probs(&[[0.6, 0.4], [0.5, 0.5]]);
        assert!(matches!(
            soft_vote(&[a.clone(), b], &[0.5, 0.5]),
            Err(EnsembleError::ShapeMismatch { index: 1, .. })
        ));
        let bad = Tensor::from_data(&[1, 2], vec![0.9, 0.4]).unwrap();
        assert!(matches!(
            soft_vote(&[a, bad], &[0.5, 0.5]),
            Err(EnsembleError::NotProbabilities { index: 1, .. })
        ));
    }

    #[test]
    fn decision_thresholding() {
        let p = probs(&[[0.3, 0.7], [0.7, 0.3], [0.5, 0.5]]);
        assert_eq!(decide(&p, 0.5), vec![1, 0, 1]);
    }

    #[test]
    fn single_member_pipeline_is_identity() {
        let a = probs(&[[0.35, 0.65], [0.9, 0.1]]);
        let w = compute_weights(&[0.87]).unwrap();
        assert_eq!(w, vec![1.0]);
        let out = soft_vote(std::slice::from_ref(&a), &w).unwrap();
        assert_eq!(out.data(), a.data());
        assert_eq!(decide(&out, 0.5), decide(&a, 0.5));
    }
}
