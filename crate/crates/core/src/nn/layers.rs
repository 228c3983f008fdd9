//! Differentiable building blocks on top of candle tensors (NCHW layout).

use candle_core::{DType, Tensor};

use super::ops::{group_normalize, im2col, silu};
use super::params::Builder;
use crate::error::{Error, Result};

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        b.scope(name, |b| {
            let bound = fan_in_bound(c_in * kernel * kernel);
            Ok(Self {
                weight: b.uniform("weight", &[c_out, c_in, kernel, kernel], bound)?,
                bias: b.uniform("bias", &[c_out], bound)?,
                stride,
                padding: kernel / 2,
            })
        })
    }

    /// A convolution whose weights and bias start at zero.
    pub fn zeroed(b: &mut Builder, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                weight: b.constant("weight", &[c_out, c_in, kernel, kernel], 0.0)?,
                bias: b.constant("bias", &[c_out], 0.0)?,
                stride: 1,
                padding: kernel / 2,
            })
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Lowered to one matmul over an im2col patch matrix.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        let (co, c, k, _) = self.weight.dims4()?;
        let (patches, ho, wo) = im2col(x, k, self.stride, self.padding)?;
        let y = self.weight.reshape((co, c * k * k))?.matmul(&patches)?.broadcast_add(&self.bias.reshape((co, 1))?)?;
        Ok(y.reshape((co, n, ho, wo))?.transpose(0, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        b.scope(name, |b| {
            let bound = fan_in_bound(d_in);
            Ok(Self { weight: b.uniform("weight", &[d_out, d_in], bound)?, bias: b.uniform("bias", &[d_out], bound)? })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
}

impl GroupNorm {
    const EPS: f64 = 1e-5;

    pub fn new(b: &mut Builder, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!("{channels} channels cannot form {groups} groups")));
        }
        b.scope(name, |b| {
            Ok(Self { groups, weight: b.constant("weight", &[channels], 1.0)?, bias: b.constant("bias", &[channels], 0.0)? })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let normed = group_normalize(x, self.groups, Self::EPS)?;
        let scale = self.weight.reshape((1, c, 1, 1))?;
        let shift = self.bias.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Two 3x3 convolutions with group normalization and SiLU, a residual skip
/// (1x1 when the width changes), and an optional time-conditioned
/// scale/shift after the first normalization.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    skip: Option<Conv2d>,
    time: Option<Linear>,
}

impl ResBlock {
    pub fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
        time_dim: Option<usize>,
    ) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                conv1: Conv2d::new(b, "conv1", c_in, c_out, 3, 1)?,
                norm1: GroupNorm::new(b, "norm1", groups, c_out)?,
                conv2: Conv2d::new(b, "conv2", c_out, c_out, 3, 1)?,
                norm2: GroupNorm::new(b, "norm2", groups, c_out)?,
                skip: if c_in != c_out { Some(Conv2d::new(b, "skip", c_in, c_out, 1, 1)?) } else { None },
                time: time_dim.map(|d| Linear::new(b, "time", d, 2 * c_out)).transpose()?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.norm1.forward(&self.conv1.forward(x)?)?;
        if let (Some(proj), Some(temb)) = (&self.time, temb) {
            let c = h.dim(1)?;
            let ss = proj.forward(&silu(temb)?)?;
            let scale = ss.narrow(1, 0, c)?.unsqueeze(2)?.unsqueeze(3)?;
            let shift = ss.narrow(1, c, c)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        }
        let h = silu(&h)?;
        let h = silu(&self.norm2.forward(&self.conv2.forward(&h)?)?)?;
        let res = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + res)?)
    }
}

/// Halves the spatial size with a stride-2 3x3 convolution.
#[derive(Debug, Clone)]
pub struct Downsample(Conv2d);

impl Downsample {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self(Conv2d::new(b, name, c_in, c_out, 3, 2)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.forward(x)
    }
}

/// Doubles the spatial size: nearest-neighbour upsampling then a 3x3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample(Conv2d);

impl Upsample {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self(Conv2d::new(b, name, c_in, c_out, 3, 1)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.0.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

/// Residual linear attention: keys are softmax-normalized over positions,
/// queries over features, so cost is linear in the number of positions.
#[derive(Debug, Clone)]
pub struct LinearAttention {
    norm: GroupNorm,
    qkv: Conv2d,
    out: Conv2d,
    out_norm: GroupNorm,
    heads: usize,
    head_dim: usize,
}

impl LinearAttention {
    pub fn new(b: &mut Builder, name: &str, channels: usize, groups: usize, heads: usize, head_dim: usize) -> Result<Self> {
        b.scope(name, |b| {
            let inner = heads * head_dim;
            Ok(Self {
                norm: GroupNorm::new(b, "norm", groups, channels)?,
                qkv: Conv2d::new(b, "qkv", channels, 3 * inner, 1, 1)?,
                out: Conv2d::new(b, "out", inner, channels, 1, 1)?,
                out_norm: GroupNorm::new(b, "out_norm", 1, channels)?,
                heads,
                head_dim,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let inner = self.heads * self.head_dim;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(1, i * inner, inner)?.reshape((n, self.heads, self.head_dim, h * w))?)
        };
        let scale = (self.head_dim as f64).powf(-0.5);
        let q = (softmax(&split(0)?, 2)? * scale)?;
        let k = softmax(&split(1)?, 3)?;
        let v = split(2)?;
        // context[d, e] = sum_n k[d, n] v[e, n]
        let context = k.contiguous()?.matmul(&v.t()?.contiguous()?)?;
        // out[e, n] = sum_d context[d, e] q[d, n]
        let out = context.t()?.contiguous()?.matmul(&q.contiguous()?)?;
        let out = out.reshape((n, inner, h, w))?;
        let out = self.out_norm.forward(&self.out.forward(&out)?)?;
        Ok((x + out)?)
    }
}

fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

/// Sinusoidal features of the step index followed by a two-layer projection.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    freqs: usize,
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbedding {
    pub fn new(b: &mut Builder, name: &str, freqs: usize, dim: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self { freqs, lin1: Linear::new(b, "lin1", 2 * freqs, dim)?, lin2: Linear::new(b, "lin2", dim, dim)? })
        })
    }

    /// Raw `[sin, cos]` features for each step, shape `[N, 2 * freqs]`.
    pub fn features(freqs: usize, steps: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(steps.len() * 2 * freqs);
        for &t in steps {
            let angles: Vec<f64> =
                (0..freqs).map(|i| t as f64 * (-(10000f64).ln() * i as f64 / freqs as f64).exp()).collect();
            out.extend(angles.iter().map(|a| a.sin()));
            out.extend(angles.iter().map(|a| a.cos()));
        }
        out
    }

    pub fn forward(&self, steps: &[usize], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let feats = Tensor::from_vec(Self::features(self.freqs, steps), (steps.len(), 2 * self.freqs), device)?
            .to_dtype(dtype)?;
        let h = silu(&self.lin1.forward(&feats)?)?;
        self.lin2.forward(&h)
    }
}
