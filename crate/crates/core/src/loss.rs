//! The combined focal label-smoothing loss with class-balanced weights.
//!
//! Per sample `i` with hard label `y_i` and softmax probabilities `p`:
//!
//! ```text
//! L_i = -w[y_i] * sum_c q_c * (1 - p_c)^gamma * log p_c
//! ```
//!
//! where `q` is the smoothed target `(1-eps)*onehot + eps/C` and `w` are the
//! effective-number class weights derived from the training counts. The
//! batch loss is the mean of `L_i`, and the gradient with respect to the
//! logits is returned analytically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("class {0} has zero count")]
    ZeroCount(usize),
    #[error("beta {0} outside [0, 1)")]
    BadBeta(f64),
    #[error("gamma {0} must be non-negative")]
    BadGamma(f64),
    #[error("epsilon {0} outside [0, 1)")]
    BadEpsilon(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("number of labels {labels} does not match batch size {batch}")]
    BatchMismatch { labels: usize, batch: usize },
    #[error("logits contain non-finite values")]
    NonFiniteLogits,
    #[error("logits shape {0:?} is not [batch, classes]")]
    BadLogits(Vec<usize>),
}

/// Smoothing and weighting parameters together with the derived per-class
/// weights (normalized to sum to the class count).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub class_counts: Vec<usize>,
    pub weights: Vec<f64>,
}

impl LossConfig {
    /// Derive weights from training-set class counts.
    pub fn new(
        gamma: f64,
        epsilon: f64,
        beta: f64,
        class_counts: &[usize],
    ) -> Result<Self, LossError> {
        if gamma < 0.0 {
            return Err(LossError::BadGamma(gamma));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(LossError::BadEpsilon(epsilon));
        }
        let weights = class_balanced_weights(class_counts, beta)?;
        Ok(LossConfig {
            gamma,
            epsilon,
            beta,
            class_counts: class_counts.to_vec(),
            weights,
        })
    }

    /// Plain cross entropy: no focusing, no smoothing, uniform weights.
    pub fn cross_entropy(class_counts: &[usize]) -> Result<Self, LossError> {
        LossConfig::new(0.0, 0.0, 0.0, class_counts)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }
}

/// Effective-number class weights: `raw_c = (1-beta) / (1-beta^{n_c})`,
/// normalized so the weights sum to the number of classes.
pub fn class_balanced_weights(counts: &[usize], beta: f64) -> Result<Vec<f64>, LossError> {
    if !(0.0..1.0).contains(&beta) {
        return Err(LossError::BadBeta(beta));
    }
    let mut raw = Vec::with_capacity(counts.len());
    for (label, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(LossError::ZeroCount(label));
        }
        let denom = 1.0 - beta.powf(n as f64);
        raw.push((1.0 - beta) / denom);
    }
    let sum: f64 = raw.iter().sum();
    let c = counts.len() as f64;
    Ok(raw.into_iter().map(|r| r * c / sum).collect())
}

/// Smoothed target distribution `(1-eps)*onehot(label) + eps/C`.
pub fn smooth_labels(
    label: usize,
    epsilon: f64,
    num_classes: usize,
) -> Result<Vec<f64>, LossError> {
    if label >= num_classes {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: num_classes,
        });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(LossError::BadEpsilon(epsilon));
    }
    let base = epsilon / num_classes as f64;
    Ok((0..num_classes)
        .map(|c| {
            if c == label {
                1.0 - epsilon + base
            } else {
                base
            }
        })
        .collect())
}

/// The focal factor `(1-p)^gamma`, clamped to zero at saturation.
#[inline]
fn focal_factor(one_minus_p: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else if one_minus_p < 1e-12 {
        0.0
    } else {
        one_minus_p.powf(gamma)
    }
}

/// Mean combined loss over a batch together with its gradient with respect
/// to the logits.
pub fn combined_loss(
    logits: &Tensor,
    labels: &[usize],
    config: &LossConfig,
) -> Result<(f64, Tensor), LossError> {
    let &[batch, classes] = logits.shape() else {
        return Err(LossError::BadLogits(logits.shape().to_vec()));
    };
    if classes != config.num_classes() {
        return Err(LossError::BadLogits(logits.shape().to_vec()));
    }
    if labels.len() != batch {
        return Err(LossError::BatchMismatch {
            labels: labels.len(),
            batch,
        });
    }
    if !logits.is_all_finite() {
        return Err(LossError::NonFiniteLogits);
    }
    let gamma = config.gamma;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    let scale = 1.0 / batch as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(LossError::LabelOutOfRange { label, classes });
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        // log-softmax for numerical stability
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let log_p: Vec<f64> = row.iter().map(|z| z - max - log_sum).collect();
        let p: Vec<f64> = log_p.iter().map(|lp| lp.exp()).collect();
        let q = smooth_labels(label, config.epsilon, classes)?;
        let w = config.weights[label];

        let mut loss_i = 0.0;
        // dL_i/dp_c, before the softmax jacobian
        let mut dldp = vec![0.0f64; classes];
        for c in 0..classes {
            let one_minus_p = 1.0 - p[c];
            let focal = focal_factor(one_minus_p, gamma);
            loss_i -= w * q[c] * focal * log_p[c];
            let mut d = focal / p[c];
            if gamma > 0.0 && one_minus_p >= 1e-12 {
                d -= gamma * one_minus_p.powf(gamma - 1.0) * log_p[c];
            }
            dldp[c] = -w * q[c] * d;
        }
        total += loss_i;
        // chain through softmax: dL/dz_k = p_k (g_k - sum_c g_c p_c)
        let dot: f64 = dldp.iter().zip(&p).map(|(g, pc)| g * pc).sum();
        for k in 0..classes {
            grad.data_mut()[i * classes + k] = scale * p[k] * (dldp[k] - dot);
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(b: usize, c: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = (0..b).map(|_| rng.random_range(0..c)).collect();
        (Tensor::from_data(&[b, c], data).unwrap(), labels)
    }

    #[test]
    fn equal_counts_give_unit_weights() {
        let w = class_balanced_weights(&[250, 250], 0.999).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_beta_gives_unit_weights_regardless_of_counts() {
        let w = class_balanced_weights(&[3, 100000], 0.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn screening_population_counts_match_reference_weights() {
        let w = class_balanced_weights(&[1608, 14392], 0.999).unwrap();
        assert!((w[0] - 1.111).abs() < 1e-3, "w0 {}", w[0]);
        assert!((w[1] - 0.889).abs() < 1e-3, "w1 {}", w[1]);
        assert!((w[0] + w[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn weights_decrease_with_class_size() {
        // strictly decreasing until beta^n underflows past f64 resolution,
        // never increasing after that
        for beta in [0.9, 0.99, 0.999, 0.9999] {
            let mut prev = f64::INFINITY;
            for n in [1usize, 5, 50, 500, 5000, 50000] {
                let raw = (1.0 - beta) / (1.0 - f64::powf(beta, n as f64));
                if f64::powf(beta, n as f64) > 1e-12 {
                    assert!(
                        raw < prev,
                        "beta {beta}: raw weight not decreasing at n={n}"
                    );
                } else {
                    assert!(raw <= prev, "beta {beta}: raw weight increased at n={n}");
                }
                prev = raw;
            }
        }
    }

    #[test]
    fn weights_reject_zero_count() {
        assert!(matches!(
            class_balanced_weights(&[0, 5], 0.9),
            Err(LossError::ZeroCount(0))
        ));
    }

    #[test]
    fn smoothing_limits() {
        assert_eq!(smooth_labels(1, 0.0, 2).unwrap(), vec![0.0, 1.0]);
        let q = smooth_labels(1, 0.2, 2).unwrap();
        assert!((q[0] - 0.1).abs() < 1e-15);
        assert!((q[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn smoothing_always_sums_to_one() {
        for eps in [0.0, 0.1, 0.2, 0.5, 0.9] {
            for c in 2..6 {
                for label in 0..c {
                    let q = smooth_labels(label, eps, c).unwrap();
                    let s: f64 = q.iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn smoothing_rejects_out_of_range_label() {
        assert!(matches!(
            smooth_labels(2, 0.1, 2),
            Err(LossError::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    /// Plain mean cross entropy via an independent log-sum-exp path.
    fn mean_cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        total / b as f64
    }

    #[test]
    fn reduces_to_cross_entropy() {
        for seed in 0..10 {
            let (logits, labels) = random_logits(6, 2, seed);
            let cfg = LossConfig::new(0.0, 0.0, 0.0, &[7, 7]).unwrap();
            let (loss, _) = combined_loss(&logits, &labels, &cfg).unwrap();
            let ce = mean_cross_entropy(&logits, &labels);
            assert!((loss - ce).abs() < 1e-12, "{loss} vs {ce}");
        }
    }

    #[test]
    fn hand_evaluated_symmetric_case() {
        // p = [0.5, 0.5], q = [0.1, 0.9]:
        // L = (0.1 + 0.9) * 0.5^2.5 * ln 2
        let logits = Tensor::from_data(&[1, 2], vec![0.0, 0.0]).unwrap();
        let cfg = LossConfig::new(2.5, 0.2, 0.0, &[5, 5]).unwrap();
        let (loss, _) = combined_loss(&logits, &[1], &cfg).unwrap();
        let expected = 0.5f64.powf(2.5) * 2.0f64.ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        assert!((expected - 0.12254).abs() < 1e-5);
    }

    /// Straightforward re-implementation used as an independent oracle:
    /// naive softmax, direct powf, no shared code with `combined_loss`.
    fn naive_combined_loss(logits: &Tensor, labels: &[usize], cfg: &LossConfig) -> f64 {
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let exps: Vec<f64> = row.iter().map(|z| z.exp()).collect();
            let z: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
            let mut li = 0.0;
            for cc in 0..c {
                let q = if cc == y { 1.0 - cfg.epsilon } else { 0.0 } + cfg.epsilon / c as f64;
                li -= cfg.weights[y] * q * (1.0 - p[cc]).powf(cfg.gamma) * p[cc].ln();
            }
            total += li;
        }
        total / b as f64
    }

    #[test]
    fn matches_independent_implementation() {
        let cfg = LossConfig::new(2.5, 0.2, 0.999, &[160, 1440]).unwrap();
        for seed in 0..20 {
            let (logits, labels) = random_logits(8, 2, seed);
            let (loss, _) = combined_loss(&logits, &labels, &cfg).unwrap();
            let naive = naive_combined_loss(&logits, &labels, &cfg);
            assert!((loss - naive).abs() < 1e-10, "{loss} vs {naive}");
        }
    }

    #[test]
    fn loss_vanishes_with_certainty_and_decreases_monotonically() {
        let cfg = LossConfig::new(2.5, 0.0, 0.0, &[5, 5]).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..30 {
            let margin = step as f64;
            let logits = Tensor::from_data(&[1, 2], vec![0.0, margin]).unwrap();
            let (loss, _) = combined_loss(&logits, &[1], &cfg).unwrap();
            assert!(loss <= prev + 1e-15, "not monotone at margin {margin}");
            prev = loss;
        }
        assert!(prev < 1e-6, "loss did not vanish: {prev}");
    }

    #[test]
    fn focusing_never_raises_the_loss_of_confident_samples() {
        // p_true > 0.5 and eps = 0: the focal factor only shrinks terms
        let logits = Tensor::from_data(&[1, 2], vec![0.0, 1.2]).unwrap();
        let mut prev = f64::INFINITY;
        for gamma in [0.0, 0.5, 1.0, 2.0, 2.5, 3.0, 4.0] {
            let cfg = LossConfig::new(gamma, 0.0, 0.0, &[5, 5]).unwrap();
            let (loss, _) = combined_loss(&logits, &[1], &cfg).unwrap();
            assert!(loss <= prev + 1e-15, "gamma {gamma} raised the loss");
            prev = loss;
        }
    }

    #[test]
    fn shift_invariance_and_batch_permutation_equivariance() {
        let cfg = LossConfig::new(2.5, 0.2, 0.99, &[30, 70]).unwrap();
        let (logits, labels) = random_logits(5, 2, 77);
        let (loss, grad) = combined_loss(&logits, &labels, &cfg).unwrap();

        // add a per-sample constant to all logits
        let shifted: Vec<f64> = logits
            .data()
            .iter()
            .enumerate()
            .map(|(i, z)| z + (i / 2) as f64 * 0.7)
            .collect();
        let shifted = Tensor::from_data(&[5, 2], shifted).unwrap();
        let (loss_s, _) = combined_loss(&shifted, &labels, &cfg).unwrap();
        assert!((loss - loss_s).abs() < 1e-10);

        // reverse the batch
        let mut rev_data = Vec::new();
        for i in (0..5).rev() {
            rev_data.extend_from_slice(&logits.data()[i * 2..(i + 1) * 2]);
        }
        let rev = Tensor::from_data(&[5, 2], rev_data).unwrap();
        let rev_labels: Vec<usize> = labels.iter().rev().cloned().collect();
        let (loss_r, grad_r) = combined_loss(&rev, &rev_labels, &cfg).unwrap();
        assert!((loss - loss_r).abs() < 1e-12);
        for i in 0..5 {
            for k in 0..2 {
                let a = grad.data()[i * 2 + k];
                let b = grad_r.data()[(4 - i) * 2 + k];
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_non_finite_logits() {
        let logits = Tensor::from_data(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        let cfg = LossConfig::cross_entropy(&[1, 1]).unwrap();
        assert!(matches!(
            combined_loss(&logits, &[0], &cfg),
            Err(LossError::NonFiniteLogits)
        ));
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let h = 1e-5;
        for seed in 0..10 {
            let cfg = LossConfig::new(2.5, 0.2, 0.999, &[60, 540]).unwrap();
            let (logits, labels) = random_logits(4, 2, 1000 + seed);
            let (_, grad) = combined_loss(&logits, &labels, &cfg).unwrap();
            for j in 0..logits.numel() {
                let mut plus = logits.clone();
                plus.data_mut()[j] += h;
                let mut minus = logits.clone();
                minus.data_mut()[j] -= h;
                let (lp, _) = combined_loss(&plus, &labels, &cfg).unwrap();
                let (lm, _) = combined_loss(&minus, &labels, &cfg).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let a = grad.data()[j];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((a - fd) / denom).abs() < 1e-6,
                    "seed {seed} coord {j}: analytic {a} vs fd {fd}"
                );
            }
        }
    }
}
