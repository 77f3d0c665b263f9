//! Squeeze-and-excitation channel attention.

use rand_chacha::ChaCha8Rng;

use super::ops::{GlobalAvgPool, Linear, Relu, Sigmoid};
use super::tensor::Tensor;
use super::{NnError, Param};

/// Channel attention: squeeze by global average pooling, excite through a
/// bottleneck MLP (`C -> ceil(C/r) -> C`) with ReLU then sigmoid, and rescale
/// each channel by its gate.
#[derive(Debug, Clone)]
pub struct SeBlock {
    fc1: Linear,
    fc2: Linear,
    relu: Relu,
    sigmoid: Sigmoid,
    pool: GlobalAvgPool,
    channels: usize,
    cache: Option<(Tensor, Tensor)>, // (input, gates)
}

impl SeBlock {
    /// `reduction` divides the channel count; the bottleneck is padded up to
    /// at least one unit when the division is not exact.
    pub fn new(channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = channels.div_ceil(reduction).max(1);
        SeBlock {
            fc1: Linear::new(channels, mid, rng),
            fc2: Linear::new(mid, channels, rng),
            relu: Relu::new(),
            sigmoid: Sigmoid::new(),
            pool: GlobalAvgPool::new(),
            channels,
            cache: None,
        }
    }

    fn check(&self, x: &Tensor) -> Result<(), NnError> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(NnError::ChannelMismatch {
                expected: self.channels,
                got: c,
            });
        }
        Ok(())
    }

    /// Channel gates for an input, computed in eval mode. Each lies in (0,1).
    pub fn gates(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check(x)?;
        let squeezed = self.pool.forward_eval(x)?;
        let hidden = self.relu.forward_eval(&self.fc1.forward_eval(&squeezed)?);
        Ok(self.sigmoid.forward_eval(&self.fc2.forward_eval(&hidden)?))
    }

    fn scale(x: &Tensor, gates: &Tensor) -> Tensor {
        let (b, c, h, w) = x.dims4().expect("validated");
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        for bi in 0..b {
            for ch in 0..c {
                let g = gates.data()[bi * c + ch];
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    out.data_mut()[i] = g * x.data()[i];
                }
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check(x)?;
        let squeezed = self.pool.forward_train(x)?;
        let hidden = self.relu.forward_train(&self.fc1.forward_train(&squeezed)?);
        let gates = self
            .sigmoid
            .forward_train(&self.fc2.forward_train(&hidden)?);
        let out = Self::scale(x, &gates);
        self.cache = Some((x.clone(), gates));
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let gates = self.gates(x)?;
        Ok(Self::scale(x, &gates))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let (x, gates) = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let (b, c, h, w) = x.dims4()?;
        let plane = h * w;
        // direct path: y = g * x
        let mut dx = Tensor::zeros(x.shape());
        let mut dgates = Tensor::zeros(&[b, c]);
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                let g = gates.data()[bi * c + ch];
                let mut acc = 0.0;
                for i in off..off + plane {
                    dx.data_mut()[i] = g * dy.data()[i];
                    acc += dy.data()[i] * x.data()[i];
                }
                dgates.data_mut()[bi * c + ch] = acc;
            }
        }
        // gate path back through the bottleneck MLP and the pooling
        let d = self.sigmoid.backward(&dgates)?;
        let d = self.fc2.backward(&d)?;
        let d = self.relu.backward(&d)?;
        let d = self.fc1.backward(&d)?;
        let d = self.pool.backward(&d)?;
        dx.add_assign(&d)?;
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_data(shape, data).unwrap()
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let se = SeBlock::new(8, 4, &mut r);
        let x = random_tensor(&[3, 8, 5, 5], &mut r);
        let g = se.gates(&x).unwrap();
        for &v in g.data() {
            assert!(v > 0.0 && v < 1.0, "gate {v} outside (0,1)");
        }
    }

    #[test]
    fn output_shape_matches_and_zero_channels_stay_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let se = SeBlock::new(4, 4, &mut r);
        let mut x = random_tensor(&[2, 4, 3, 3], &mut r);
        for i in 0..9 {
            x.data_mut()[9 + i] = 0.0; // zero out channel 1 of batch 0
        }
        let y = se.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data()[9..18].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attenuates_every_nonzero_value() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let se = SeBlock::new(6, 4, &mut r);
        let x = random_tensor(&[2, 6, 4, 4], &mut r);
        let y = se.forward_eval(&x).unwrap();
        for (xi, yi) in x.data().iter().zip(y.data()) {
            if *xi != 0.0 {
                assert!(yi.abs() < xi.abs(), "|{yi}| not < |{xi}|");
            }
        }
    }

    #[test]
    fn forcing_unit_gates_reproduces_the_input() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let se = SeBlock::new(5, 4, &mut r);
        let x = random_tensor(&[2, 5, 3, 3], &mut r);
        let ones = Tensor::from_data(&[2, 5], vec![1.0; 10]).unwrap();
        let y = SeBlock::scale(&x, &ones);
        assert_eq!(y.data(), x.data());
        // and with real gates the output is exactly gate * input per channel
        let gates = se.gates(&x).unwrap();
        let scaled = SeBlock::scale(&x, &gates);
        assert_eq!(se.forward_eval(&x).unwrap().data(), scaled.data());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let se = SeBlock::new(8, 4, &mut r);
        let x = random_tensor(&[1, 4, 3, 3], &mut r);
        assert!(matches!(
            se.forward_eval(&x),
            Err(NnError::ChannelMismatch {
                expected: 8,
                got: 4
            })
        ));
    }

    #[test]
    fn bottleneck_pads_up_to_one_unit() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        // channels < reduction still yields a valid (1-unit) bottleneck
        let se = SeBlock::new(3, 4, &mut r);
        let x = random_tensor(&[2, 3, 2, 2], &mut r);
        assert!(se.forward_eval(&x).is_ok());
    }
}
