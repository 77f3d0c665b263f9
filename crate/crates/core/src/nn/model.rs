//! Model specification and assembly of the three architecture families.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{DenseBlock, Head, MbConvBlock, ResidualBlock, Stem, Transition};
use super::ops::{softmax, AvgPool2d};
use super::tensor::Tensor;
use super::{NnError, Param};
use crate::mix_seed;

/// Architecture family.
///
/// `Residual` stacks conv-bn-relu pairs with skips (attention on each block
/// output), `Dense` grows channels by concatenation with attention at the
/// transitions, `InvertedBottleneck` uses expand/depthwise/project blocks
/// with attention on the expanded features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Residual,
    Dense,
    InvertedBottleneck,
}

/// Expansion factor of the inverted-bottleneck family.
pub const MBCONV_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Everything needed to build a model deterministically.
///
/// For the dense family `base_channels` is the growth rate; its stem is twice
/// that wide. For the other families stage `i` is `base_channels << i` wide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// Blocks per stage (layers per dense block for the dense family).
    pub stage_blocks: Vec<usize>,
    pub base_channels: usize,
    pub se_reduction: usize,
    pub dropout: f64,
    pub num_classes: usize,
    /// Expected input (width, height).
    pub input_size: (usize, usize),
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.num_classes != 2 {
            return Err(NnError::BadSpec(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if !(0.3..=0.5).contains(&self.dropout) {
            return Err(NnError::BadSpec(format!(
                "dropout {} outside the supported 0.3..0.5 range",
                self.dropout
            )));
        }
        if self.base_channels == 0 || self.se_reduction == 0 {
            return Err(NnError::BadSpec("zero channel or reduction count".into()));
        }
        if self.stage_blocks.is_empty() || self.stage_blocks.contains(&0) {
            return Err(NnError::BadSpec(format!(
                "stage_blocks {:?} must be non-empty with positive counts",
                self.stage_blocks
            )));
        }
        self.simulate_spatial()?;
        Ok(())
    }

    fn stem_channels(&self) -> usize {
        match self.family {
            Family::Dense => 2 * self.base_channels,
            _ => self.base_channels,
        }
    }

    /// Walk the downsampling chain, rejecting specs whose input is too small
    /// for some pooling or convolution stage.
    fn simulate_spatial(&self) -> Result<(usize, usize), NnError> {
        let (w, h) = self.input_size;
        let too_small = |stage: &str, h: usize, w: usize| {
            NnError::BadSpec(format!(
                "input {:?} leaves only {h}x{w} pixels at {stage}",
                self.input_size
            ))
        };
        // stem: stride-2 conv then 2x2 max pool
        if h < 3 || w < 3 {
            return Err(too_small("the stem convolution", h, w));
        }
        let (mut h, mut w) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        if h < 2 || w < 2 {
            return Err(too_small("the stem pool", h, w));
        }
        h /= 2;
        w /= 2;
        // each stage boundary halves the spatial extent once
        for stage in 0..self.stage_blocks.len() {
            if h < 2 || w < 2 {
                return Err(too_small(&format!("stage {stage}"), h, w));
            }
            match self.family {
                Family::Dense => {
                    h /= 2;
                    w /= 2;
                }
                _ => {
                    h = (h - 1) / 2 + 1;
                    w = (w - 1) / 2 + 1;
                }
            }
        }
        Ok((h, w))
    }
}

#[derive(Debug)]
enum Body {
    Residual(Vec<ResidualBlock>),
    Dense {
        entry: AvgPool2d,
        blocks: Vec<DenseBlock>,
        transitions: Vec<Transition>,
    },
    Inverted(Vec<MbConvBlock>),
}

/// An instantiated network with its parameters and normalization statistics.
#[derive(Debug)]
pub struct Model {
    spec: ModelSpec,
    mode: Option<Mode>,
    stem: Stem,
    body: Body,
    head: Head,
}

/// Build a model from its spec; parameters are He-initialized from the
/// spec's seed, so equal specs give equal models.
pub fn build_model(spec: &ModelSpec) -> Result<Model, NnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x1417));
    let stem = Stem::new(spec.stem_channels(), &mut rng);
    let (body, head_in) = match spec.family {
        Family::Residual => {
            let mut blocks = Vec::new();
            let mut in_ch = spec.base_channels;
            for (stage, &count) in spec.stage_blocks.iter().enumerate() {
                let out_ch = spec.base_channels << stage;
                for b in 0..count {
                    let stride = if b == 0 { 2 } else { 1 };
                    blocks.push(ResidualBlock::new(
                        in_ch,
                        out_ch,
                        stride,
                        Some(spec.se_reduction),
                        &mut rng,
                    ));
                    in_ch = out_ch;
                }
            }
            (Body::Residual(blocks), in_ch)
        }
        Family::Dense => {
            let growth = spec.base_channels;
            let mut blocks = Vec::new();
            let mut transitions = Vec::new();
            let mut ch = spec.stem_channels();
            for (stage, &layers) in spec.stage_blocks.iter().enumerate() {
                if stage > 0 {
                    let out = (ch / 2).max(1);
                    transitions.push(Transition::new(ch, out, spec.se_reduction, &mut rng));
                    ch = out;
                }
                blocks.push(DenseBlock::new(ch, growth, layers, &mut rng));
                ch += growth * layers;
            }
            (
                Body::Dense {
                    entry: AvgPool2d::new(2),
                    blocks,
                    transitions,
                },
                ch,
            )
        }
        Family::InvertedBottleneck => {
            let mut blocks = Vec::new();
            let mut in_ch = spec.base_channels;
            for (stage, &count) in spec.stage_blocks.iter().enumerate() {
                let out_ch = spec.base_channels << stage;
                for b in 0..count {
                    let stride = if b == 0 { 2 } else { 1 };
                    blocks.push(MbConvBlock::new(
                        in_ch,
                        out_ch,
                        stride,
                        MBCONV_EXPANSION,
                        spec.se_reduction,
                        &mut rng,
                    ));
                    in_ch = out_ch;
                }
            }
            (Body::Inverted(blocks), in_ch)
        }
    };
    let head = Head::new(
        head_in,
        spec.num_classes,
        spec.dropout,
        matches!(spec.family, Family::Dense),
        &mut rng,
    );
    Ok(Model {
        spec: spec.clone(),
        mode: None,
        stem,
        body,
        head,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = Some(mode);
    }

    pub fn mode(&self) -> Option<Mode> {
        self.mode
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        let (_, c, _, _) = x.dims4()?;
        if c != 1 {
            return Err(NnError::ChannelMismatch {
                expected: 1,
                got: c,
            });
        }
        Ok(())
    }

    /// Forward pass in the explicitly set mode; training mode caches
    /// activations for [`Model::backward`] and consumes dropout draws.
    pub fn forward(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor, NnError> {
        match self.mode {
            None => Err(NnError::ModeNotSet),
            Some(Mode::Eval) => self.predict(x),
            Some(Mode::Train) => {
                self.check_input(x)?;
                let mut y = self.stem.forward_train(x)?;
                match &mut self.body {
                    Body::Residual(blocks) => {
                        for b in blocks {
                            y = b.forward_train(&y)?;
                        }
                    }
                    Body::Dense {
                        entry,
                        blocks,
                        transitions,
                    } => {
                        y = entry.forward_train(&y)?;
                        for (i, b) in blocks.iter_mut().enumerate() {
                            if i > 0 {
                                y = transitions[i - 1].forward_train(&y)?;
                            }
                            y = b.forward_train(&y)?;
                        }
                    }
                    Body::Inverted(blocks) => {
                        for b in blocks {
                            y = b.forward_train(&y)?;
                        }
                    }
                }
                let logits = self.head.forward_train(&y, rng)?;
                if !logits.is_all_finite() {
                    return Err(NnError::NonFinite("forward logits"));
                }
                Ok(logits)
            }
        }
    }

    /// Cache-free eval-mode forward; usable concurrently through `&self`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut y = self.stem.forward_eval(x)?;
        match &self.body {
            Body::Residual(blocks) => {
                for b in blocks {
                    y = b.forward_eval(&y)?;
                }
            }
            Body::Dense {
                entry,
                blocks,
                transitions,
            } => {
                y = entry.forward_eval(&y)?;
                for (i, b) in blocks.iter().enumerate() {
                    if i > 0 {
                        y = transitions[i - 1].forward_eval(&y)?;
                    }
                    y = b.forward_eval(&y)?;
                }
            }
            Body::Inverted(blocks) => {
                for b in blocks {
                    y = b.forward_eval(&y)?;
                }
            }
        }
        self.head.forward_eval(&y)
    }

    /// Softmax class probabilities in eval mode.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor, NnError> {
        softmax(&self.predict(x)?)
    }

    /// Backpropagate a logits gradient, accumulating parameter gradients.
    /// Returns the input gradient.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor, NnError> {
        if self.mode != Some(Mode::Train) {
            return Err(NnError::NoForwardCache);
        }
        let mut d = self.head.backward(dlogits)?;
        match &mut self.body {
            Body::Residual(blocks) => {
                for b in blocks.iter_mut().rev() {
                    d = b.backward(&d)?;
                }
            }
            Body::Dense {
                entry,
                blocks,
                transitions,
            } => {
                for (i, b) in blocks.iter_mut().enumerate().rev() {
                    d = b.backward(&d)?;
                    if i > 0 {
                        d = transitions[i - 1].backward(&d)?;
                    }
                }
                d = entry.backward(&d)?;
            }
            Body::Inverted(blocks) => {
                for b in blocks.iter_mut().rev() {
                    d = b.backward(&d)?;
                }
            }
        }
        self.stem.backward(&d)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        match &self.body {
            Body::Residual(blocks) => v.extend(blocks.iter().flat_map(|b| b.params())),
            Body::Dense {
                blocks,
                transitions,
                ..
            } => {
                for (i, b) in blocks.iter().enumerate() {
                    if i > 0 {
                        v.extend(transitions[i - 1].params());
                    }
                    v.extend(b.params());
                }
            }
            Body::Inverted(blocks) => v.extend(blocks.iter().flat_map(|b| b.params())),
        }
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        match &mut self.body {
            Body::Residual(blocks) => v.extend(blocks.iter_mut().flat_map(|b| b.params_mut())),
            Body::Dense {
                blocks,
                transitions,
                ..
            } => {
                let mut t = transitions.iter_mut();
                for (i, b) in blocks.iter_mut().enumerate() {
                    if i > 0 {
                        v.extend(t.next().expect("one transition per boundary").params_mut());
                    }
                    v.extend(b.params_mut());
                }
            }
            Body::Inverted(blocks) => v.extend(blocks.iter_mut().flat_map(|b| b.params_mut())),
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn stats(&self) -> Vec<&Vec<f64>> {
        let mut v = self.stem.stats();
        match &self.body {
            Body::Residual(blocks) => v.extend(blocks.iter().flat_map(|b| b.stats())),
            Body::Dense {
                blocks,
                transitions,
                ..
            } => {
                for (i, b) in blocks.iter().enumerate() {
                    if i > 0 {
                        v.extend(transitions[i - 1].stats());
                    }
                    v.extend(b.stats());
                }
            }
            Body::Inverted(blocks) => v.extend(blocks.iter().flat_map(|b| b.stats())),
        }
        v.extend(self.head.stats());
        v
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.stem.stats_mut();
        match &mut self.body {
            Body::Residual(blocks) => v.extend(blocks.iter_mut().flat_map(|b| b.stats_mut())),
            Body::Dense {
                blocks,
                transitions,
                ..
            } => {
                let mut t = transitions.iter_mut();
                for (i, b) in blocks.iter_mut().enumerate() {
                    if i > 0 {
                        v.extend(t.next().expect("one transition per boundary").stats_mut());
                    }
                    v.extend(b.stats_mut());
                }
            }
            Body::Inverted(blocks) => v.extend(blocks.iter_mut().flat_map(|b| b.stats_mut())),
        }
        v.extend(self.head.stats_mut());
        v
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.data.numel()).sum()
    }
}

/// The four desk-scale architectures, seeded from a master seed.
pub fn default_model_specs(input_size: (usize, usize), seed: u64) -> Vec<(String, ModelSpec)> {
    let spec = |family, stage_blocks: &[usize], base_channels, dropout, salt| ModelSpec {
        family,
        stage_blocks: stage_blocks.to_vec(),
        base_channels,
        se_reduction: 4,
        dropout,
        num_classes: 2,
        input_size,
        seed: mix_seed(seed, salt),
    };
    vec![
        (
            "residual_small".into(),
            spec(Family::Residual, &[2, 2], 16, 0.3, 1),
        ),
        (
            "residual_deep".into(),
            spec(Family::Residual, &[3, 3, 3], 16, 0.3, 2),
        ),
        (
            "dense_small".into(),
            spec(Family::Dense, &[4, 4], 8, 0.5, 3),
        ),
        (
            "inverted_bottleneck_small".into(),
            spec(Family::InvertedBottleneck, &[1, 1, 1], 16, 0.4, 4),
        ),
    ]
}

/// Larger variants for full-resolution runs.
pub fn paper_scale_model_specs(input_size: (usize, usize), seed: u64) -> Vec<(String, ModelSpec)> {
    let spec = |family, stage_blocks: &[usize], base_channels, dropout, salt| ModelSpec {
        family,
        stage_blocks: stage_blocks.to_vec(),
        base_channels,
        se_reduction: 4,
        dropout,
        num_classes: 2,
        input_size,
        seed: mix_seed(seed, salt),
    };
    vec![
        (
            "residual_small".into(),
            spec(Family::Residual, &[2, 2, 2, 2], 32, 0.3, 1),
        ),
        (
            "residual_deep".into(),
            spec(Family::Residual, &[3, 4, 6, 3], 32, 0.3, 2),
        ),
        (
            "dense_small".into(),
            spec(Family::Dense, &[6, 12, 8], 16, 0.5, 3),
        ),
        (
            "inverted_bottleneck_small".into(),
            spec(Family::InvertedBottleneck, &[2, 3, 3, 4], 24, 0.4, 4),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_spec(family: Family, stage_blocks: &[usize]) -> ModelSpec {
        ModelSpec {
            family,
            stage_blocks: stage_blocks.to_vec(),
            base_channels: 8,
            se_reduction: 4,
            dropout: 0.3,
            num_classes: 2,
            input_size: (32, 64),
            seed: 7,
        }
    }

    fn random_batch(b: usize, w: usize, h: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_data(&[b, 1, h, w], data).unwrap()
    }

    #[test]
    fn same_spec_and_seed_give_identical_parameters() {
        let spec = tiny_spec(Family::Residual, &[2, 2]);
        let a = build_model(&spec).unwrap();
        let b = build_model(&spec).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data.data(), pb.data.data());
        }
    }

    #[test]
    fn logits_have_two_columns_for_every_family() {
        for family in [Family::Residual, Family::Dense, Family::InvertedBottleneck] {
            let spec = tiny_spec(family, &[1, 1]);
            let model = build_model(&spec).unwrap();
            let x = random_batch(3, 32, 64, 1);
            let logits = model.predict(&x).unwrap();
            assert_eq!(logits.shape(), &[3, 2], "{family:?}");
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_proba_rows_normalize() {
        let spec = tiny_spec(Family::InvertedBottleneck, &[1, 1]);
        let model = build_model(&spec).unwrap();
        let x = random_batch(4, 32, 64, 2);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert_eq!(a.data(), b.data());
        let p = model.predict_proba(&x).unwrap();
        for bi in 0..4 {
            let s: f64 = p.data()[bi * 2..(bi + 1) * 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_requires_mode() {
        let spec = tiny_spec(Family::Residual, &[1]);
        let mut model = build_model(&spec).unwrap();
        let x = random_batch(2, 32, 64, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            model.forward(&x, &mut rng),
            Err(NnError::ModeNotSet)
        ));
        model.set_mode(Mode::Train);
        assert!(model.forward(&x, &mut rng).is_ok());
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let spec = tiny_spec(Family::Residual, &[1]);
        let model = build_model(&spec).unwrap();
        let x = Tensor::zeros(&[2, 3, 64, 32]);
        assert!(matches!(
            model.predict(&x),
            Err(NnError::ChannelMismatch {
                expected: 1,
                got: 3
            })
        ));
    }

    #[test]
    fn spec_validation_rejects_bad_configs() {
        let mut spec = tiny_spec(Family::Residual, &[1]);
        spec.num_classes = 4;
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec(Family::Residual, &[1]);
        spec.dropout = 0.05;
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec(Family::Residual, &[3, 3, 3]);
        spec.input_size = (8, 8); // too small for three halvings
        assert!(spec.validate().is_err());
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn parameter_count_matches_hand_computation() {
        // one-stage, 8-channel residual spec, counted layer by layer
        let spec = ModelSpec {
            family: Family::Residual,
            stage_blocks: vec![1],
            base_channels: 8,
            se_reduction: 4,
            dropout: 0.3,
            num_classes: 2,
            input_size: (32, 32),
            seed: 0,
        };
        let model = build_model(&spec).unwrap();
        let stem = 1 * 8 * 3 * 3 + 2 * 8; // conv 1->8 plus bn gamma/beta
        let block_convs = 8 * 8 * 3 * 3 + 2 * 8 + 8 * 8 * 3 * 3 + 2 * 8;
        // stage entry has stride 2, so the skip is projected: 1x1 conv + bn
        let block_proj = 8 * 8 * 1 * 1 + 2 * 8;
        let se = (8 * 2 + 2) + (2 * 8 + 8); // fc 8->2 and fc 2->8, with biases
        let head = 8 * 2 + 2;
        assert_eq!(
            model.parameter_count(),
            stem + block_convs + block_proj + se + head
        );
    }

    #[test]
    fn eval_forward_serves_concurrent_callers() {
        let spec = tiny_spec(Family::Residual, &[1, 1]);
        let model = build_model(&spec).unwrap();
        let x = random_batch(2, 32, 64, 6);
        let reference = model.predict(&x).unwrap();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..4)
                .map(|_| scope.spawn(|| model.predict(&x).unwrap()))
                .collect();
            for h in handles {
                assert_eq!(h.join().unwrap().data(), reference.data());
            }
        });
    }

    #[test]
    fn paper_scale_specs_validate() {
        for (name, spec) in paper_scale_model_specs((512, 1024), 9) {
            assert!(spec.validate().is_ok(), "{name}");
        }
    }

    #[test]
    fn default_specs_build_and_run() {
        for (name, spec) in default_model_specs((128, 256), 5) {
            let model = build_model(&spec).unwrap();
            let x = random_batch(2, 128, 256, 4);
            let logits = model.predict(&x).unwrap();
            assert_eq!(logits.shape(), &[2, 2], "{name}");
        }
    }
}
