//! Central finite-difference verification of analytic gradients.
//!
//! The checks perturb parameters (or inputs) and re-run the forward pass
//! only, so they are independent of every backward implementation they
//! verify. Used by the unit and acceptance suites and by the `gradcheck`
//! command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{build_model, Mode, ModelSpec};
use super::ops::{
    softmax, softmax_backward, AvgPool2d, BatchNorm2d, Conv2d, Dropout, GlobalAvgPool, Linear,
    MaxPool2d, Relu, Sigmoid,
};
use super::se::SeBlock;
use super::tensor::Tensor;
use super::{NnError, Param};
use crate::loss::{combined_loss, LossConfig};

/// Symmetric relative error. The denominator is floored at 1e-3: below
/// that scale a central difference with step 1e-6 carries noise of the
/// same order as the tolerances checked here, so the comparison degrades
/// to an absolute one (and exact zeros on inactive paths report 0).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckResult {
    pub max_rel_err: f64,
    pub checks: usize,
    /// (analytic, numeric) at the worst coordinate.
    pub worst_pair: (f64, f64),
}

impl CheckResult {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst_pair = (analytic, numeric);
        }
        self.checks += 1;
    }

    pub fn merge(&mut self, other: CheckResult) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_pair = other.worst_pair;
        }
        self.checks += other.checks;
    }
}

const FD_STEP: f64 = 1e-6;

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_data(shape, data).expect("consistent shape")
}

/// Check a layer's input and parameter gradients for the scalar objective
/// `sum(r * layer(x))` with a random projection `r`.
///
/// `forward` must be a pure function of `(layer params, x)`; stochastic
/// layers freeze their draws inside the closure.
fn check_layer<L>(
    mut layer: L,
    x0: &Tensor,
    rng: &mut ChaCha8Rng,
    mut forward: impl FnMut(&mut L, &Tensor) -> Tensor,
    mut backward: impl FnMut(&mut L, &Tensor) -> Tensor,
    mut params: impl FnMut(&mut L) -> Vec<&mut Param>,
) -> CheckResult {
    let y0 = forward(&mut layer, x0);
    let projection = random_tensor(y0.shape(), -1.0, 1.0, rng);

    // analytic gradients
    for p in params(&mut layer) {
        p.zero_grad();
    }
    forward(&mut layer, x0);
    let dx = backward(&mut layer, &projection);
    let grads: Vec<Tensor> = params(&mut layer).iter().map(|p| p.grad.clone()).collect();

    let mut result = CheckResult::default();
    let mut objective = |layer: &mut L, x: &Tensor| -> f64 {
        forward(layer, x)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut x = x0.clone();
    for j in 0..x.numel() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + FD_STEP;
        let up = objective(&mut layer, &x);
        x.data_mut()[j] = orig - FD_STEP;
        let down = objective(&mut layer, &x);
        x.data_mut()[j] = orig;
        result.record(dx.data()[j], (up - down) / (2.0 * FD_STEP));
    }
    for (pi, grad) in grads.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = params(&mut layer)[pi].data.data()[j];
            params(&mut layer)[pi].data.data_mut()[j] = orig + FD_STEP;
            let up = objective(&mut layer, x0);
            params(&mut layer)[pi].data.data_mut()[j] = orig - FD_STEP;
            let down = objective(&mut layer, x0);
            params(&mut layer)[pi].data.data_mut()[j] = orig;
            result.record(grad.data()[j], (up - down) / (2.0 * FD_STEP));
        }
    }
    result
}

/// Finite-difference sweep over every primitive, `instances` rounds each.
pub fn check_primitives(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = CheckResult::default();
    for round in 0..instances {
        let r = &mut rng;

        // conv2d: plain, strided+biased, depthwise
        let x = random_tensor(&[2, 4, 6, 5], -1.0, 1.0, r);
        total.merge(check_layer(
            Conv2d::new(4, 3, 3, 1, 1, false, r),
            &x,
            r,
            |l, x| l.forward_train(x).unwrap(),
            |l, d| l.backward(d).unwrap(),
            |l| l.params_mut(),
        ));
        let x = random_tensor(&[2, 2, 7, 6], -1.0, 1.0, r);
        total.merge(check_layer(
            Conv2d::new(2, 4, 3, 2, 1, true, r),
            &x,
            r,
            |l, x| l.forward_train(x).unwrap(),
            |l, d| l.backward(d).unwrap(),
            |l| l.params_mut(),
        ));
        let x = random_tensor(&[2, 4, 5, 5], -1.0, 1.0, r);
        total.merge(check_layer(
            Conv2d::new(4, 4, 3, 1, 4, false, r),
            &x,
            r,
            |l, x| l.forward_train(x).unwrap(),
            |l, d| l.backward(d).unwrap(),
            |l| l.params_mut(),
        ));

        // batch norm, train-statistics path
        let x = random_tensor(&[3, 3, 4, 4], -1.0, 1.0, r);
        total.merge(check_layer(
            BatchNorm2d::new(3),
            &x,
            r,
            |l, x| l.forward_train(x).unwrap(),
            |l, d| l.backward(d).unwrap(),
            |l| l.params_mut(),
        ));

        // linear
        let x = random_tensor(&[3, 6], -1.0, 1.0, r);
        total.merge(check_layer(
            Linear::new(6, 4, r),
            &x,
            r,
            |l, x| l.forward_train(x).unwrap(),
            |l, d| l.backward(d).unwrap(),
            |l| l.params_mut(),
        ));

        // relu: keep inputs away from the kink by more than the step
        let x = {
            let mut t = random_tensor(&[2, 3, 4, 4], -1.0, 1.0, r);
            for v in t.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 2e-3;
                }
            }
            t
        };
        total.merge(check_layer(
            Relu::new(),
            &x,
            r,
            |l, x| l.forward_train(x),
            |l, d| l.backward(d).unwrap(),
            |_| Vec::new(),
        ));

        // sigmoid
        let x = random_tensor(&[2, 8], -2.0, 2.0, r);
        total.merge(check_layer(
            Sigmoid::new(),
            &x,
            r,
            |l, x| l.forward_train(x),
            |l, d| l.backward(d).unwrap(),
            |_| Vec::new(),
        ));

        // pooling
        let x = random_tensor(&[2, 2, 6, 6], -1.0, 1.0, r);
        total.merge(check_layer(
            MaxPool2d::new(2),
            &x,
            r,
            |l, x| l.forward_train(x).unwrap(),
            |l, d| l.backward(d).unwrap(),
            |_| Vec::new(),
        ));
        let x = random_tensor(&[2, 2, 6, 6], -1.0, 1.0, r);
        total.merge(check_layer(
            AvgPool2d::new(2),
            &x,
            r,
            |l, x| l.forward_train(x).unwrap(),
            |l, d| l.backward(d).unwrap(),
            |_| Vec::new(),
        ));
        let x = random_tensor(&[2, 3, 4, 5], -1.0, 1.0, r);
        total.merge(check_layer(
            GlobalAvgPool::new(),
            &x,
            r,
            |l, x| l.forward_train(x).unwrap(),
            |l, d| l.backward(d).unwrap(),
            |_| Vec::new(),
        ));

        // dropout with a frozen mask: same draw seed on every evaluation
        let x = random_tensor(&[3, 8], -1.0, 1.0, r);
        let mask_seed = 4096 + round as u64;
        total.merge(check_layer(
            Dropout::new(0.4),
            &x,
            r,
            move |l, x| l.forward_train(x, &mut ChaCha8Rng::seed_from_u64(mask_seed)),
            |l, d| l.backward(d).unwrap(),
            |_| Vec::new(),
        ));

        // softmax (functional)
        let x = random_tensor(&[3, 4], -2.0, 2.0, r);
        {
            let y = softmax(&x).unwrap();
            let projection = random_tensor(y.shape(), -1.0, 1.0, r);
            let dx = softmax_backward(&y, &projection).unwrap();
            let mut xp = x.clone();
            for j in 0..xp.numel() {
                let orig = xp.data()[j];
                xp.data_mut()[j] = orig + FD_STEP;
                let up: f64 = softmax(&xp)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(projection.data())
                    .map(|(a, b)| a * b)
                    .sum();
                xp.data_mut()[j] = orig - FD_STEP;
                let down: f64 = softmax(&xp)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(projection.data())
                    .map(|(a, b)| a * b)
                    .sum();
                xp.data_mut()[j] = orig;
                total.record(dx.data()[j], (up - down) / (2.0 * FD_STEP));
            }
        }
    }
    total
}

/// Finite-difference sweep over the squeeze-and-excitation block.
pub fn check_se_block(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = CheckResult::default();
    for _ in 0..instances {
        let r = &mut rng;
        let se = SeBlock::new(6, 4, r);
        let x = random_tensor(&[2, 6, 4, 4], -1.0, 1.0, r);
        total.merge(check_layer(
            se,
            &x,
            r,
            |l, x| l.forward_train(x).unwrap(),
            |l, d| l.backward(d).unwrap(),
            |l| l.params_mut(),
        ));
    }
    total
}

/// Combined-loss gradient against central differences on random batches.
pub fn check_loss(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = CheckResult::default();
    for i in 0..instances {
        let gamma = [0.0, 1.0, 2.5, 3.0][i % 4];
        let epsilon = [0.0, 0.1, 0.2][i % 3];
        let cfg = LossConfig::new(gamma, epsilon, 0.999, &[1608, 14392]).expect("valid config");
        let logits = random_tensor(&[5, 2], -3.0, 3.0, &mut rng);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..2)).collect();
        let (_, grad) = combined_loss(&logits, &labels, &cfg).expect("finite logits");
        let mut x = logits.clone();
        for j in 0..x.numel() {
            let orig = x.data()[j];
            x.data_mut()[j] = orig + FD_STEP;
            let (up, _) = combined_loss(&x, &labels, &cfg).expect("finite");
            x.data_mut()[j] = orig - FD_STEP;
            let (down, _) = combined_loss(&x, &labels, &cfg).expect("finite");
            x.data_mut()[j] = orig;
            total.record(grad.data()[j], (up - down) / (2.0 * FD_STEP));
        }
    }
    total
}

/// End-to-end check: loss-through-model gradients for sampled parameter
/// coordinates against central differences. Dropout draws are frozen per
/// evaluation so the objective is a fixed function of the parameters.
pub fn check_model_spec(
    spec: &ModelSpec,
    instances: usize,
    coords_per_instance: usize,
    seed: u64,
) -> Result<CheckResult, NnError> {
    let mut total = CheckResult::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for round in 0..instances {
        let mut spec = spec.clone();
        spec.seed = rng.random();
        let mut model = build_model(&spec)?;
        model.set_mode(Mode::Train);
        let (w, h) = spec.input_size;
        let x = random_tensor(&[2, 1, h, w], 0.0, 1.0, &mut rng);
        let labels = vec![rng.random_range(0..2), rng.random_range(0..2)];
        let cfg = LossConfig::new(2.5, 0.2, 0.999, &[40, 360]).expect("valid config");
        let draw_seed = crate::mix_seed(seed, 100 + round as u64);

        // analytic pass
        model.zero_grads();
        let logits = model.forward(&x, &mut ChaCha8Rng::seed_from_u64(draw_seed))?;
        let (_, dlogits) = combined_loss(&logits, &labels, &cfg).expect("loss");
        model.backward(&dlogits)?;
        let analytic: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| p.grad.data().to_vec())
            .collect();

        let objective = |model: &mut super::model::Model| -> f64 {
            let logits = model
                .forward(&x, &mut ChaCha8Rng::seed_from_u64(draw_seed))
                .expect("forward");
            combined_loss(&logits, &labels, &cfg).expect("loss").0
        };

        // sample coordinates across the whole parameter vector
        let sizes: Vec<usize> = model.params().iter().map(|p| p.data.numel()).collect();
        let total_params: usize = sizes.iter().sum();
        for _ in 0..coords_per_instance {
            let flat = rng.random_range(0..total_params);
            let (mut tensor_idx, mut offset) = (0usize, flat);
            while offset >= sizes[tensor_idx] {
                offset -= sizes[tensor_idx];
                tensor_idx += 1;
            }
            let orig = model.params()[tensor_idx].data.data()[offset];
            model.params_mut()[tensor_idx].data.data_mut()[offset] = orig + FD_STEP;
            let up = objective(&mut model);
            model.params_mut()[tensor_idx].data.data_mut()[offset] = orig - FD_STEP;
            let down = objective(&mut model);
            model.params_mut()[tensor_idx].data.data_mut()[offset] = orig;
            total.record(analytic[tensor_idx][offset], (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(total)
}

/// Small per-family specs for gradient checking: full depth and attention,
/// reduced width and input so a sweep stays fast.
pub fn gradcheck_model_specs() -> Vec<(String, ModelSpec)> {
    use super::model::Family;
    let spec = |family, stage_blocks: &[usize], base, dropout| ModelSpec {
        family,
        stage_blocks: stage_blocks.to_vec(),
        base_channels: base,
        se_reduction: 4,
        dropout,
        num_classes: 2,
        input_size: (32, 64),
        seed: 0,
    };
    vec![
        (
            "residual_small".into(),
            spec(Family::Residual, &[2, 2], 8, 0.3),
        ),
        (
            "residual_deep".into(),
            spec(Family::Residual, &[3, 3, 3], 8, 0.3),
        ),
        ("dense_small".into(), spec(Family::Dense, &[4, 4], 8, 0.5)),
        (
            "inverted_bottleneck_small".into(),
            spec(Family::InvertedBottleneck, &[1, 1, 1], 8, 0.4),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_match_finite_differences() {
        let result = check_primitives(2, 11);
        assert!(
            result.max_rel_err < 1e-5,
            "max relative error {} over {} checks",
            result.max_rel_err,
            result.checks
        );
    }

    #[test]
    fn se_block_matches_finite_differences() {
        let result = check_se_block(3, 12);
        assert!(result.max_rel_err < 1e-5, "{}", result.max_rel_err);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let result = check_loss(5, 13);
        assert!(result.max_rel_err < 1e-6, "{}", result.max_rel_err);
    }

    #[test]
    fn every_family_matches_finite_differences_end_to_end() {
        for (name, spec) in gradcheck_model_specs() {
            let result = check_model_spec(&spec, 1, 24, 14).unwrap();
            assert!(
                result.max_rel_err < 1e-5,
                "{name}: max relative error {}",
                result.max_rel_err
            );
        }
    }
}
