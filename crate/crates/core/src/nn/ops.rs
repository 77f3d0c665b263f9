//! Differentiable primitives: convolution, batch normalization, linear,
//! activations, pooling, dropout, softmax.
//!
//! Every layer offers `forward_train` (caches what backward needs),
//! `forward_eval` (pure, cache-free) and `backward` (consumes the cache,
//! accumulates parameter gradients, returns the input gradient).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use super::{NnError, Param};

/// Row-major GEMM wrapper over `matrixmultiply`: `c = alpha*a*b + beta*c`.
/// Strides let callers pass transposed views without copying.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!((m - 1) as isize * rsa + (k - 1) as isize * csa < a.len() as isize);
    debug_assert!((k - 1) as isize * rsb + (n - 1) as isize * csb < b.len() as isize);
    debug_assert!(m * n <= c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// He (fan-in) normal initialization.
pub fn he_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_data(shape, data).expect("consistent shape")
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-d convolution with square kernels, "same"-style zero padding and
/// optional channel groups (`groups == in_channels` gives depthwise).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param, // [out_ch, (in_ch/groups) * k * k]
    pub bias: Option<Param>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            in_ch.is_multiple_of(groups) && out_ch.is_multiple_of(groups),
            "bad group count"
        );
        let k_in = in_ch / groups * kernel * kernel;
        let weight = Param::new(he_init(&[out_ch, k_in], k_in, rng), true);
        let bias = bias.then(|| Param::new(Tensor::zeros(&[out_ch]), false));
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            groups,
            cache: None,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    pub fn spatial_out(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let k = self.kernel;
        let p = self.padding;
        if h + 2 * p < k || w + 2 * p < k {
            return Err(NnError::BadShape(format!(
                "conv kernel {k} exceeds padded input {h}x{w}"
            )));
        }
        Ok((
            (h + 2 * p - k) / self.stride + 1,
            (w + 2 * p - k) / self.stride + 1,
        ))
    }

    fn im2col(&self, x: &Tensor, group: usize, ho: usize, wo: usize, col: &mut [f64]) {
        let (b, _c, h, w) = x.dims4().expect("checked by caller");
        let cg = self.in_ch / self.groups;
        let k = self.kernel;
        let s = self.stride;
        let p = self.padding as isize;
        let n = b * ho * wo;
        let xd = x.data();
        for ci in 0..cg {
            let c_abs = group * cg + ci;
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let base = row * n;
                    for bi in 0..b {
                        let x_plane = (bi * self.in_ch + c_abs) * h * w;
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + ky as isize - p;
                            let out_row = base + bi * ho * wo + oy * wo;
                            if iy < 0 || iy >= h as isize {
                                col[out_row..out_row + wo].fill(0.0);
                                continue;
                            }
                            let x_row = x_plane + iy as usize * w;
                            for ox in 0..wo {
                                let ix = (ox * s) as isize + kx as isize - p;
                                col[out_row + ox] = if ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    xd[x_row + ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn compute_forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(NnError::ChannelMismatch {
                expected: self.in_ch,
                got: c,
            });
        }
        let (ho, wo) = self.spatial_out(h, w)?;
        let cg_in = self.in_ch / self.groups;
        let cg_out = self.out_ch / self.groups;
        let kk = cg_in * self.kernel * self.kernel;
        let n = b * ho * wo;
        let mut out = Tensor::zeros(&[b, self.out_ch, ho, wo]);
        let mut col = vec![0.0f64; kk * n];
        let mut gout = vec![0.0f64; cg_out * n];
        for g in 0..self.groups {
            self.im2col(x, g, ho, wo, &mut col);
            let w_g = &self.weight.data.data()[g * cg_out * kk..(g + 1) * cg_out * kk];
            gemm(
                cg_out,
                kk,
                n,
                1.0,
                w_g,
                kk as isize,
                1,
                &col,
                n as isize,
                1,
                0.0,
                &mut gout,
            );
            let od = out.data_mut();
            for m in 0..cg_out {
                let c_abs = g * cg_out + m;
                for bi in 0..b {
                    let src = m * n + bi * ho * wo;
                    let dst = (bi * self.out_ch + c_abs) * ho * wo;
                    od[dst..dst + ho * wo].copy_from_slice(&gout[src..src + ho * wo]);
                }
            }
        }
        if let Some(bias) = &self.bias {
            let od = out.data_mut();
            for bi in 0..b {
                for c_abs in 0..self.out_ch {
                    let off = (bi * self.out_ch + c_abs) * ho * wo;
                    let bv = bias.data.data()[c_abs];
                    od[off..off + ho * wo].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let out = self.compute_forward(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.compute_forward(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let x = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let (b, _c, h, w) = x.dims4()?;
        let (ho, wo) = self.spatial_out(h, w)?;
        let (db, dc, dho, dwo) = dy.dims4()?;
        if (db, dc, dho, dwo) != (b, self.out_ch, ho, wo) {
            return Err(NnError::ShapeMismatch {
                op: "conv2d backward",
                lhs: vec![b, self.out_ch, ho, wo],
                rhs: dy.shape().to_vec(),
            });
        }
        let cg_in = self.in_ch / self.groups;
        let cg_out = self.out_ch / self.groups;
        let kk = cg_in * self.kernel * self.kernel;
        let n = b * ho * wo;
        let mut col = vec![0.0f64; kk * n];
        let mut dy_g = vec![0.0f64; cg_out * n];
        let mut dcol = vec![0.0f64; kk * n];
        let mut dx = Tensor::zeros(x.shape());
        for g in 0..self.groups {
            self.im2col(&x, g, ho, wo, &mut col);
            let dyd = dy.data();
            for m in 0..cg_out {
                let c_abs = g * cg_out + m;
                for bi in 0..b {
                    let src = (bi * self.out_ch + c_abs) * ho * wo;
                    let dst = m * n + bi * ho * wo;
                    dy_g[dst..dst + ho * wo].copy_from_slice(&dyd[src..src + ho * wo]);
                }
            }
            // dW += dy_g * col^T
            let wg_grad = &mut self.weight.grad.data_mut()[g * cg_out * kk..(g + 1) * cg_out * kk];
            gemm(
                cg_out, n, kk, 1.0, &dy_g, n as isize, 1, &col, 1, n as isize, 1.0, wg_grad,
            );
            if let Some(bias) = &mut self.bias {
                for m in 0..cg_out {
                    let sum: f64 = dy_g[m * n..(m + 1) * n].iter().sum();
                    bias.grad.data_mut()[g * cg_out + m] += sum;
                }
            }
            // dcol = W^T * dy_g
            let w_g = &self.weight.data.data()[g * cg_out * kk..(g + 1) * cg_out * kk];
            gemm(
                kk,
                cg_out,
                n,
                1.0,
                w_g,
                1,
                kk as isize,
                &dy_g,
                n as isize,
                1,
                0.0,
                &mut dcol,
            );
            // col2im scatter-add
            let k = self.kernel;
            let s = self.stride;
            let p = self.padding as isize;
            let dxd = dx.data_mut();
            for ci in 0..cg_in {
                let c_abs = g * cg_in + ci;
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let base = row * n;
                        for bi in 0..b {
                            let x_plane = (bi * self.in_ch + c_abs) * h * w;
                            for oy in 0..ho {
                                let iy = (oy * s) as isize + ky as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let x_row = x_plane + iy as usize * w;
                                let src_row = base + bi * ho * wo + oy * wo;
                                for ox in 0..wo {
                                    let ix = (ox * s) as isize + kx as isize - p;
                                    if ix >= 0 && ix < w as isize {
                                        dxd[x_row + ix as usize] += dcol[src_row + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    channels: usize,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        let gamma = Param::new(
            Tensor::from_data(&[channels], vec![1.0; channels]).expect("shape"),
            false,
        );
        let beta = Param::new(Tensor::zeros(&[channels]), false);
        BatchNorm2d {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            channels,
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn check_channels(&self, x: &Tensor) -> Result<(usize, usize, usize, usize), NnError> {
        let dims = x.dims4()?;
        if dims.1 != self.channels {
            return Err(NnError::ChannelMismatch {
                expected: self.channels,
                got: dims.1,
            });
        }
        Ok(dims)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let (b, c, h, w) = self.check_channels(x)?;
        if b < 2 {
            return Err(NnError::BatchTooSmall(b));
        }
        let plane = h * w;
        let count = (b * plane) as f64;
        let xd = x.data();
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0f64; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                mean += xd[off..off + plane].iter().sum::<f64>();
            }
            mean /= count;
            let mut var = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                var += xd[off..off + plane]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= count;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.data.data()[ch];
            let be = self.beta.data.data()[ch];
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xd[i] - mean) * istd;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = g * xh + be;
                }
            }
            // running statistics track the unbiased batch variance
            let unbiased = var * count / (count - 1.0);
            self.running_mean[ch] =
                (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (b, c, h, w) = self.check_channels(x)?;
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        for ch in 0..c {
            let istd = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let scale = self.gamma.data.data()[ch] * istd;
            let shift = self.beta.data.data()[ch] - scale * self.running_mean[ch];
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    out.data_mut()[i] = scale * x.data()[i] + shift;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let BnCache { xhat, inv_std } = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let (b, c, h, w) = self.check_channels(dy)?;
        let plane = h * w;
        let count = (b * plane) as f64;
        let dyd = dy.data();
        let xh = xhat.data();
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    sum_dy += dyd[i];
                    sum_dy_xhat += dyd[i] * xh[i];
                }
            }
            self.beta.grad.data_mut()[ch] += sum_dy;
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat;
            let g = self.gamma.data.data()[ch];
            let k = g * inv_std[ch];
            let mean_dy = sum_dy / count;
            let mean_dy_xhat = sum_dy_xhat / count;
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    dx.data_mut()[i] = k * (dyd[i] - mean_dy - xh[i] * mean_dy_xhat);
                }
            }
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn stats(&self) -> Vec<&Vec<f64>> {
        vec![&self.running_mean, &self.running_var]
    }

    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer on `[batch, features]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param, // [out, in]
    pub bias: Param,   // [out]
    in_features: usize,
    out_features: usize,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::new(
                he_init(&[out_features, in_features], in_features, rng),
                true,
            ),
            bias: Param::new(Tensor::zeros(&[out_features]), false),
            in_features,
            out_features,
            cache: None,
        }
    }

    fn compute_forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (b, f) = x.dims2()?;
        if f != self.in_features {
            return Err(NnError::ShapeMismatch {
                op: "linear",
                lhs: vec![b, self.in_features],
                rhs: x.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[b, self.out_features]);
        gemm(
            b,
            self.in_features,
            self.out_features,
            1.0,
            x.data(),
            self.in_features as isize,
            1,
            self.weight.data.data(),
            1,
            self.in_features as isize,
            0.0,
            out.data_mut(),
        );
        for bi in 0..b {
            for o in 0..self.out_features {
                out.data_mut()[bi * self.out_features + o] += self.bias.data.data()[o];
            }
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let out = self.compute_forward(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.compute_forward(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let x = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let (b, _) = x.dims2()?;
        let (db, dof) = dy.dims2()?;
        if db != b || dof != self.out_features {
            return Err(NnError::ShapeMismatch {
                op: "linear backward",
                lhs: vec![b, self.out_features],
                rhs: dy.shape().to_vec(),
            });
        }
        // dW += dy^T * x
        gemm(
            self.out_features,
            b,
            self.in_features,
            1.0,
            dy.data(),
            1,
            self.out_features as isize,
            x.data(),
            self.in_features as isize,
            1,
            1.0,
            self.weight.grad.data_mut(),
        );
        for bi in 0..b {
            for o in 0..self.out_features {
                self.bias.grad.data_mut()[o] += dy.data()[bi * self.out_features + o];
            }
        }
        let mut dx = Tensor::zeros(&[b, self.in_features]);
        gemm(
            b,
            self.out_features,
            self.in_features,
            1.0,
            dy.data(),
            self.out_features as isize,
            1,
            self.weight.data.data(),
            self.in_features as isize,
            1,
            0.0,
            dx.data_mut(),
        );
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
        let out = self.apply(x);
        self.cache = Some(mask);
        out
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        self.apply(x)
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_data(x.shape(), data).expect("same shape")
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let mask = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let data = dy
            .data()
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| if m { d } else { 0.0 })
            .collect();
        Tensor::from_data(dy.shape(), data)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    cache: Option<Tensor>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Sigmoid::default()
    }

    fn apply(x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        Tensor::from_data(x.shape(), data).expect("same shape")
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = Self::apply(x);
        self.cache = Some(y.clone());
        y
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        Self::apply(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let y = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let data = dy
            .data()
            .iter()
            .zip(y.data())
            .map(|(&d, &s)| d * s * (1.0 - s))
            .collect();
        Tensor::from_data(dy.shape(), data)
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Spatial mean per channel: `[B,C,H,W] -> [B,C]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool::default()
    }

    fn apply(x: &Tensor) -> Result<Tensor, NnError> {
        let (b, c, h, w) = x.dims4()?;
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, c]);
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                out.data_mut()[bi * c + ch] =
                    x.data()[off..off + plane].iter().sum::<f64>() / plane as f64;
            }
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let (_, _, h, w) = x.dims4()?;
        let out = Self::apply(x)?;
        self.cache = Some((h, w));
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        Self::apply(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let (h, w) = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let (b, c) = dy.dims2()?;
        let plane = h * w;
        let mut dx = Tensor::zeros(&[b, c, h, w]);
        for bi in 0..b {
            for ch in 0..c {
                let g = dy.data()[bi * c + ch] / plane as f64;
                let off = (bi * c + ch) * plane;
                dx.data_mut()[off..off + plane].fill(g);
            }
        }
        Ok(dx)
    }
}

/// Max pooling with square kernel and matching stride. The first maximum
/// wins on ties, which keeps the backward routing deterministic.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    kernel: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>, // (input shape, argmax flat indices)
}

impl MaxPool2d {
    pub fn new(kernel: usize) -> Self {
        MaxPool2d {
            kernel,
            cache: None,
        }
    }

    pub fn spatial_out(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        if h < self.kernel || w < self.kernel {
            return Err(NnError::BadShape(format!(
                "maxpool kernel {} exceeds input {h}x{w}",
                self.kernel
            )));
        }
        Ok((h / self.kernel, w / self.kernel))
    }

    fn apply(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
        let (b, c, h, w) = x.dims4()?;
        let (ho, wo) = self.spatial_out(h, w)?;
        let k = self.kernel;
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        let mut argmax = vec![0usize; b * c * ho * wo];
        let xd = x.data();
        for bi in 0..b {
            for ch in 0..c {
                let plane = (bi * c + ch) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let idx = plane + (oy * k + ky) * w + ox * k + kx;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((bi * c + ch) * ho + oy) * wo + ox;
                        out.data_mut()[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        Ok((out, argmax))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let (out, argmax) = self.apply(x)?;
        self.cache = Some((x.shape().to_vec(), argmax));
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.apply(x)?.0)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let (shape, argmax) = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let mut dx = Tensor::zeros(&shape);
        for (o, &src) in argmax.iter().enumerate() {
            dx.data_mut()[src] += dy.data()[o];
        }
        Ok(dx)
    }
}

/// Average pooling with square kernel and matching stride.
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    kernel: usize,
    cache: Option<Vec<usize>>,
}

impl AvgPool2d {
    pub fn new(kernel: usize) -> Self {
        AvgPool2d {
            kernel,
            cache: None,
        }
    }

    pub fn spatial_out(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        if h < self.kernel || w < self.kernel {
            return Err(NnError::BadShape(format!(
                "avgpool kernel {} exceeds input {h}x{w}",
                self.kernel
            )));
        }
        Ok((h / self.kernel, w / self.kernel))
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (b, c, h, w) = x.dims4()?;
        let (ho, wo) = self.spatial_out(h, w)?;
        let k = self.kernel;
        let norm = 1.0 / (k * k) as f64;
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        let xd = x.data();
        for bi in 0..b {
            for ch in 0..c {
                let plane = (bi * c + ch) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += xd[plane + (oy * k + ky) * w + ox * k + kx];
                            }
                        }
                        out.data_mut()[((bi * c + ch) * ho + oy) * wo + ox] = acc * norm;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let out = self.apply(x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.apply(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let shape = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (db, dc, ho, wo) = dy.dims4()?;
        if db != b || dc != c {
            return Err(NnError::ShapeMismatch {
                op: "avgpool backward",
                lhs: shape,
                rhs: dy.shape().to_vec(),
            });
        }
        let k = self.kernel;
        let norm = 1.0 / (k * k) as f64;
        let mut dx = Tensor::zeros(&shape);
        for bi in 0..b {
            for ch in 0..c {
                let plane = (bi * c + ch) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = dy.data()[((bi * c + ch) * ho + oy) * wo + ox] * norm;
                        for ky in 0..k {
                            for kx in 0..k {
                                dx.data_mut()[plane + (oy * k + ky) * w + ox * k + kx] += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: kept units are scaled by `1/(1-rate)` during training;
/// evaluation is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    cache: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        Dropout { rate, cache: None }
    }

    pub fn forward_train(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = x
            .data()
            .iter()
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.cache = Some(mask);
        Tensor::from_data(x.shape(), data).expect("same shape")
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        x.clone()
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError> {
        let mask = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let data = dy.data().iter().zip(&mask).map(|(&d, &m)| d * m).collect();
        Tensor::from_data(dy.shape(), data)
    }
}

// ---------------------------------------------------------------------------
// Softmax and channel plumbing
// ---------------------------------------------------------------------------

/// Row-wise softmax on `[batch, classes]`.
pub fn softmax(logits: &Tensor) -> Result<Tensor, NnError> {
    let (b, c) = logits.dims2()?;
    let mut out = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        let row = &logits.data()[bi * c..(bi + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            out.data_mut()[bi * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out.data_mut()[bi * c + j] /= sum;
        }
    }
    Ok(out)
}

/// Softmax input gradient given its output `y` and upstream `dy`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor, NnError> {
    let (b, c) = y.dims2()?;
    if y.shape() != dy.shape() {
        return Err(NnError::ShapeMismatch {
            op: "softmax backward",
            lhs: y.shape().to_vec(),
            rhs: dy.shape().to_vec(),
        });
    }
    let mut dx = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        let yr = &y.data()[bi * c..(bi + 1) * c];
        let dr = &dy.data()[bi * c..(bi + 1) * c];
        let dot: f64 = yr.iter().zip(dr).map(|(&a, &g)| a * g).sum();
        for j in 0..c {
            dx.data_mut()[bi * c + j] = yr[j] * (dr[j] - dot);
        }
    }
    Ok(dx)
}

/// Concatenate along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if ba != bb || ha != hb || wa != wb {
        return Err(NnError::ShapeMismatch {
            op: "concat_channels",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let plane = ha * wa;
    let mut out = Tensor::zeros(&[ba, ca + cb, ha, wa]);
    for bi in 0..ba {
        let dst = bi * (ca + cb) * plane;
        let src_a = bi * ca * plane;
        let src_b = bi * cb * plane;
        out.data_mut()[dst..dst + ca * plane].copy_from_slice(&a.data()[src_a..src_a + ca * plane]);
        out.data_mut()[dst + ca * plane..dst + (ca + cb) * plane]
            .copy_from_slice(&b.data()[src_b..src_b + cb * plane]);
    }
    Ok(out)
}

/// Split a channel concatenation back into its two parts.
pub fn split_channels(t: &Tensor, ca: usize) -> Result<(Tensor, Tensor), NnError> {
    let (b, c, h, w) = t.dims4()?;
    if ca >= c {
        return Err(NnError::BadShape(format!(
            "cannot split {ca} channels out of {c}"
        )));
    }
    let cb = c - ca;
    let plane = h * w;
    let mut a = Tensor::zeros(&[b, ca, h, w]);
    let mut bt = Tensor::zeros(&[b, cb, h, w]);
    for bi in 0..b {
        let src = bi * c * plane;
        a.data_mut()[bi * ca * plane..(bi + 1) * ca * plane]
            .copy_from_slice(&t.data()[src..src + ca * plane]);
        bt.data_mut()[bi * cb * plane..(bi + 1) * cb * plane]
            .copy_from_slice(&t.data()[src + ca * plane..src + c * plane]);
    }
    Ok((a, bt))
}
