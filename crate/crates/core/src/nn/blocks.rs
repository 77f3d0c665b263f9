//! Architecture building blocks composed from the primitives.

use rand_chacha::ChaCha8Rng;

use super::ops::{
    concat_channels, split_channels, AvgPool2d, BatchNorm2d, Conv2d, Dropout, GlobalAvgPool,
    Linear, MaxPool2d, Relu,
};
use super::se::SeBlock;
use super::tensor::Tensor;
use super::{NnError, Param};

/// Shared entry: 3x3 stride-2 convolution, batch norm, ReLU, 2x2 max pool.
/// Reduces spatial extent by 4 before the stages.
#[derive(Debug, Clone)]
pub struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
    pool: MaxPool2d,
}

impl Stem {
    pub fn new(out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Stem {
            conv: Conv2d::new(1, out_ch, 3, 2, 1, false, rng),
            bn: BatchNorm2d::new(out_ch),
            relu: Relu::new(),
            pool: MaxPool2d::new(2),
        }
    }

    pub fn spatial_out(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let (h, w) = self.conv.spatial_out(h, w)?;
        self.pool.spatial_out(h, w)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.conv.forward_train(x)?;
        let y = self.bn.forward_train(&y)?;
        let y = self.relu.forward_train(&y);
        self.pool.forward_train(&y)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.conv.forward_eval(x)?;
        let y = self.bn.forward_eval(&y)?;
        let y = self.relu.forward_eval(&y);
        self.pool.forward_eval(&y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let d = self.pool.backward(dy)?;
        let d = self.relu.backward(&d)?;
        let d = self.bn.backward(&d)?;
        self.conv.backward(&d)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }

    pub fn stats(&self) -> Vec<&Vec<f64>> {
        self.bn.stats()
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.bn.stats_mut()
    }
}

/// Two conv-bn-relu units plus a skip path, with channel attention applied
/// to the block output. The skip is projected (1x1 conv + bn) whenever the
/// geometry changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
    proj: Option<(Conv2d, BatchNorm2d)>,
    se: Option<SeBlock>,
}

impl ResidualBlock {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        se_reduction: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let proj = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(in_ch, out_ch, 1, stride, 1, false, rng),
                BatchNorm2d::new(out_ch),
            )
        });
        ResidualBlock {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(out_ch),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_ch),
            relu2: Relu::new(),
            proj,
            se: se_reduction.map(|r| SeBlock::new(out_ch, r, rng)),
        }
    }

    pub fn spatial_out(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        self.conv1.spatial_out(h, w)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.conv1.forward_train(x)?;
        let y = self.bn1.forward_train(&y)?;
        let y = self.relu1.forward_train(&y);
        let y = self.conv2.forward_train(&y)?;
        let y = self.bn2.forward_train(&y)?;
        let body = self.relu2.forward_train(&y);
        let skip = match &mut self.proj {
            Some((conv, bn)) => {
                let s = conv.forward_train(x)?;
                bn.forward_train(&s)?
            }
            None => x.clone(),
        };
        let sum = body.add(&skip)?;
        match &mut self.se {
            Some(se) => se.forward_train(&sum),
            None => Ok(sum),
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.conv1.forward_eval(x)?;
        let y = self.bn1.forward_eval(&y)?;
        let y = self.relu1.forward_eval(&y);
        let y = self.conv2.forward_eval(&y)?;
        let y = self.bn2.forward_eval(&y)?;
        let body = self.relu2.forward_eval(&y);
        let skip = match &self.proj {
            Some((conv, bn)) => bn.forward_eval(&conv.forward_eval(x)?)?,
            None => x.clone(),
        };
        let sum = body.add(&skip)?;
        match &self.se {
            Some(se) => se.forward_eval(&sum),
            None => Ok(sum),
        }
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let d_sum = match &mut self.se {
            Some(se) => se.backward(dy)?,
            None => dy.clone(),
        };
        let d = self.relu2.backward(&d_sum)?;
        let d = self.bn2.backward(&d)?;
        let d = self.conv2.backward(&d)?;
        let d = self.relu1.backward(&d)?;
        let d = self.bn1.backward(&d)?;
        let mut dx = self.conv1.backward(&d)?;
        let d_skip = match &mut self.proj {
            Some((conv, bn)) => {
                let s = bn.backward(&d_sum)?;
                conv.backward(&s)?
            }
            None => d_sum,
        };
        dx.add_assign(&d_skip)?;
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        if let Some((conv, bn)) = &self.proj {
            v.extend(conv.params());
            v.extend(bn.params());
        }
        if let Some(se) = &self.se {
            v.extend(se.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = &mut self.proj {
            v.extend(conv.params_mut());
            v.extend(bn.params_mut());
        }
        if let Some(se) = &mut self.se {
            v.extend(se.params_mut());
        }
        v
    }

    pub fn stats(&self) -> Vec<&Vec<f64>> {
        let mut v = self.bn1.stats();
        v.extend(self.bn2.stats());
        if let Some((_, bn)) = &self.proj {
            v.extend(bn.stats());
        }
        v
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.bn1.stats_mut();
        v.extend(self.bn2.stats_mut());
        if let Some((_, bn)) = &mut self.proj {
            v.extend(bn.stats_mut());
        }
        v
    }
}

/// One densely connected layer: pre-activation conv producing `growth`
/// channels, concatenated onto its input.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    bn: BatchNorm2d,
    relu: Relu,
    conv: Conv2d,
    in_ch: usize,
}

impl DenseLayer {
    pub fn new(in_ch: usize, growth: usize, rng: &mut ChaCha8Rng) -> Self {
        DenseLayer {
            bn: BatchNorm2d::new(in_ch),
            relu: Relu::new(),
            conv: Conv2d::new(in_ch, growth, 3, 1, 1, false, rng),
            in_ch,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.bn.forward_train(x)?;
        let y = self.relu.forward_train(&y);
        let t = self.conv.forward_train(&y)?;
        concat_channels(x, &t)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.bn.forward_eval(x)?;
        let y = self.relu.forward_eval(&y);
        let t = self.conv.forward_eval(&y)?;
        concat_channels(x, &t)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let (mut dx, dt) = split_channels(dy, self.in_ch)?;
        let d = self.conv.backward(&dt)?;
        let d = self.relu.backward(&d)?;
        let d = self.bn.backward(&d)?;
        dx.add_assign(&d)?;
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.bn.params();
        v.extend(self.conv.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.bn.params_mut();
        v.extend(self.conv.params_mut());
        v
    }

    pub fn stats(&self) -> Vec<&Vec<f64>> {
        self.bn.stats()
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.bn.stats_mut()
    }
}

/// A stack of dense layers; output channels grow by `growth` per layer.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn new(in_ch: usize, growth: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..layers)
            .map(|i| DenseLayer::new(in_ch + i * growth, growth, rng))
            .collect();
        DenseBlock { layers }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut y = x.clone();
        for layer in &mut self.layers {
            y = layer.forward_train(&y)?;
        }
        Ok(y)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut y = x.clone();
        for layer in &self.layers {
            y = layer.forward_eval(&y)?;
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let mut d = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            d = layer.backward(&d)?;
        }
        Ok(d)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn stats(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| l.stats()).collect()
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.stats_mut()).collect()
    }
}

/// Between dense blocks: compress channels with a 1x1 convolution, gate them
/// with channel attention, then halve the spatial extent.
#[derive(Debug, Clone)]
pub struct Transition {
    bn: BatchNorm2d,
    relu: Relu,
    conv: Conv2d,
    se: SeBlock,
    pool: AvgPool2d,
}

impl Transition {
    pub fn new(in_ch: usize, out_ch: usize, se_reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        Transition {
            bn: BatchNorm2d::new(in_ch),
            relu: Relu::new(),
            conv: Conv2d::new(in_ch, out_ch, 1, 1, 1, false, rng),
            se: SeBlock::new(out_ch, se_reduction, rng),
            pool: AvgPool2d::new(2),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.bn.forward_train(x)?;
        let y = self.relu.forward_train(&y);
        let y = self.conv.forward_train(&y)?;
        let y = self.se.forward_train(&y)?;
        self.pool.forward_train(&y)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.bn.forward_eval(x)?;
        let y = self.relu.forward_eval(&y);
        let y = self.conv.forward_eval(&y)?;
        let y = self.se.forward_eval(&y)?;
        self.pool.forward_eval(&y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let d = self.pool.backward(dy)?;
        let d = self.se.backward(&d)?;
        let d = self.conv.backward(&d)?;
        let d = self.relu.backward(&d)?;
        self.bn.backward(&d)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.bn.params();
        v.extend(self.conv.params());
        v.extend(self.se.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.bn.params_mut();
        v.extend(self.conv.params_mut());
        v.extend(self.se.params_mut());
        v
    }

    pub fn stats(&self) -> Vec<&Vec<f64>> {
        self.bn.stats()
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.bn.stats_mut()
    }
}

/// Inverted bottleneck: 1x1 expansion, depthwise 3x3, channel attention on
/// the expanded features, 1x1 linear projection; identity skip when the
/// geometry allows it.
#[derive(Debug, Clone)]
pub struct MbConvBlock {
    conv_expand: Conv2d,
    bn_expand: BatchNorm2d,
    relu_expand: Relu,
    conv_dw: Conv2d,
    bn_dw: BatchNorm2d,
    relu_dw: Relu,
    se: SeBlock,
    conv_project: Conv2d,
    bn_project: BatchNorm2d,
    use_skip: bool,
}

impl MbConvBlock {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        expansion: usize,
        se_reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mid = in_ch * expansion;
        MbConvBlock {
            conv_expand: Conv2d::new(in_ch, mid, 1, 1, 1, false, rng),
            bn_expand: BatchNorm2d::new(mid),
            relu_expand: Relu::new(),
            conv_dw: Conv2d::new(mid, mid, 3, stride, mid, false, rng),
            bn_dw: BatchNorm2d::new(mid),
            relu_dw: Relu::new(),
            se: SeBlock::new(mid, se_reduction, rng),
            conv_project: Conv2d::new(mid, out_ch, 1, 1, 1, false, rng),
            bn_project: BatchNorm2d::new(out_ch),
            use_skip: stride == 1 && in_ch == out_ch,
        }
    }

    pub fn spatial_out(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        self.conv_dw.spatial_out(h, w)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.conv_expand.forward_train(x)?;
        let y = self.bn_expand.forward_train(&y)?;
        let y = self.relu_expand.forward_train(&y);
        let y = self.conv_dw.forward_train(&y)?;
        let y = self.bn_dw.forward_train(&y)?;
        let y = self.relu_dw.forward_train(&y);
        let y = self.se.forward_train(&y)?;
        let y = self.conv_project.forward_train(&y)?;
        let y = self.bn_project.forward_train(&y)?;
        if self.use_skip {
            y.add(x)
        } else {
            Ok(y)
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = self.conv_expand.forward_eval(x)?;
        let y = self.bn_expand.forward_eval(&y)?;
        let y = self.relu_expand.forward_eval(&y);
        let y = self.conv_dw.forward_eval(&y)?;
        let y = self.bn_dw.forward_eval(&y)?;
        let y = self.relu_dw.forward_eval(&y);
        let y = self.se.forward_eval(&y)?;
        let y = self.conv_project.forward_eval(&y)?;
        let y = self.bn_project.forward_eval(&y)?;
        if self.use_skip {
            y.add(x)
        } else {
            Ok(y)
        }
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let d = self.bn_project.backward(dy)?;
        let d = self.conv_project.backward(&d)?;
        let d = self.se.backward(&d)?;
        let d = self.relu_dw.backward(&d)?;
        let d = self.bn_dw.backward(&d)?;
        let d = self.conv_dw.backward(&d)?;
        let d = self.relu_expand.backward(&d)?;
        let d = self.bn_expand.backward(&d)?;
        let mut dx = self.conv_expand.backward(&d)?;
        if self.use_skip {
            dx.add_assign(dy)?;
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.conv_expand.params();
        v.extend(self.bn_expand.params());
        v.extend(self.conv_dw.params());
        v.extend(self.bn_dw.params());
        v.extend(self.se.params());
        v.extend(self.conv_project.params());
        v.extend(self.bn_project.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv_expand.params_mut();
        v.extend(self.bn_expand.params_mut());
        v.extend(self.conv_dw.params_mut());
        v.extend(self.bn_dw.params_mut());
        v.extend(self.se.params_mut());
        v.extend(self.conv_project.params_mut());
        v.extend(self.bn_project.params_mut());
        v
    }

    pub fn stats(&self) -> Vec<&Vec<f64>> {
        let mut v = self.bn_expand.stats();
        v.extend(self.bn_dw.stats());
        v.extend(self.bn_project.stats());
        v
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.bn_expand.stats_mut();
        v.extend(self.bn_dw.stats_mut());
        v.extend(self.bn_project.stats_mut());
        v
    }
}

/// Classifier head: optional pre-activation (dense family), global average
/// pooling, dropout, and the final fully connected layer.
#[derive(Debug, Clone)]
pub struct Head {
    pre: Option<(BatchNorm2d, Relu)>,
    pool: GlobalAvgPool,
    dropout: Dropout,
    fc: Linear,
}

impl Head {
    pub fn new(
        in_ch: usize,
        num_classes: usize,
        dropout: f64,
        pre_activation: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Head {
            pre: pre_activation.then(|| (BatchNorm2d::new(in_ch), Relu::new())),
            pool: GlobalAvgPool::new(),
            dropout: Dropout::new(dropout),
            fc: Linear::new(in_ch, num_classes, rng),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor, NnError> {
        let y = match &mut self.pre {
            Some((bn, relu)) => relu.forward_train(&bn.forward_train(x)?),
            None => x.clone(),
        };
        let y = self.pool.forward_train(&y)?;
        let y = self.dropout.forward_train(&y, rng);
        self.fc.forward_train(&y)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let y = match &self.pre {
            Some((bn, relu)) => relu.forward_eval(&bn.forward_eval(x)?),
            None => x.clone(),
        };
        let y = self.pool.forward_eval(&y)?;
        self.fc.forward_eval(&self.dropout.forward_eval(&y))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let d = self.fc.backward(dy)?;
        let d = self.dropout.backward(&d)?;
        let d = self.pool.backward(&d)?;
        match &mut self.pre {
            Some((bn, relu)) => {
                let d = relu.backward(&d)?;
                bn.backward(&d)
            }
            None => Ok(d),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        if let Some((bn, _)) = &self.pre {
            v.extend(bn.params());
        }
        v.extend(self.fc.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        if let Some((bn, _)) = &mut self.pre {
            v.extend(bn.params_mut());
        }
        v.extend(self.fc.params_mut());
        v
    }

    pub fn stats(&self) -> Vec<&Vec<f64>> {
        match &self.pre {
            Some((bn, _)) => bn.stats(),
            None => Vec::new(),
        }
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match &mut self.pre {
            Some((bn, _)) => bn.stats_mut(),
            None => Vec::new(),
        }
    }
}
