//! Encoder, codeword up-projection and conditional U-Net denoiser.
//!
//! All tensors are NCHW. A cropped angular-delay block enters as
//! `[N, 2, 32, 32]` (real and imaginary planes).

mod layers;
mod ops;
mod params;

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{Conv2d, Downsample, GroupNorm, LinearAttention, Linear, ResBlock, TimeEmbedding, Upsample};
pub use ops::{group_normalize, silu};
pub use params::{Builder, ParamStore};

use crate::error::{Error, Result};
use crate::{AD_SIZE, CODE_GRID};

/// Channels of a cropped angular-delay block (real, imaginary).
pub const BLOCK_CHANNELS: usize = 2;

/// Layer widths of the encoder, the up-projection and the U-Net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    /// Channel widths after the two encoder stages; the last one is the
    /// codebook vector dimension.
    pub encoder_widths: [usize; 2],
    /// Width of the 16x16 stage of the up-projection.
    pub upproj_width: usize,
    /// Channels of the 32x32 conditioning features.
    pub cond_channels: usize,
    pub unet_base: usize,
    pub unet_mults: Vec<usize>,
    pub attn_heads: usize,
    pub attn_head_dim: usize,
    pub time_freqs: usize,
    pub groups: usize,
    pub side_info: bool,
}

impl ArchDescriptor {
    /// The full-size architecture (widths 64/128, U-Net 64 x (1, 2, 3, 4)).
    pub fn full(side_info: bool) -> Self {
        Self {
            encoder_widths: [64, 128],
            upproj_width: 64,
            cond_channels: 8,
            unet_base: 64,
            unet_mults: vec![1, 2, 3, 4],
            attn_heads: 4,
            attn_head_dim: 32,
            time_freqs: 64,
            groups: 8,
            side_info,
        }
    }

    /// A reduced profile that trains in minutes on one CPU core.
    pub fn desk(side_info: bool) -> Self {
        Self {
            encoder_widths: [8, 16],
            upproj_width: 8,
            cond_channels: 8,
            unet_base: 8,
            unet_mults: vec![1, 2],
            attn_heads: 2,
            attn_head_dim: 8,
            time_freqs: 32,
            groups: 4,
            side_info,
        }
    }

    pub fn code_dim(&self) -> usize {
        self.encoder_widths[1]
    }

    pub fn time_dim(&self) -> usize {
        4 * self.unet_base
    }

    /// Input channels of the U-Net: noisy target, conditioning features and
    /// optionally the side information.
    pub fn unet_in_channels(&self) -> usize {
        BLOCK_CHANNELS + self.cond_channels + if self.side_info { BLOCK_CHANNELS } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet_mults.is_empty() {
            return Err(Error::Config("U-Net needs at least one stage".into()));
        }
        // Every stage except the last halves the resolution.
        if AD_SIZE >> (self.unet_mults.len() - 1) < 2 {
            return Err(Error::Config("too many U-Net stages for a 32x32 input".into()));
        }
        let widths = self
            .encoder_widths
            .iter()
            .chain([&self.upproj_width, &self.cond_channels])
            .copied()
            .chain(self.unet_mults.iter().map(|m| m * self.unet_base));
        for w in widths {
            if w == 0 || w % self.groups != 0 {
                return Err(Error::Config(format!("width {w} is not a positive multiple of {} groups", self.groups)));
            }
        }
        if self.attn_heads == 0 || self.attn_head_dim == 0 || self.time_freqs == 0 {
            return Err(Error::Config("attention and time embedding sizes must be positive".into()));
        }
        Ok(())
    }
}

fn check_block_input(x: &Tensor, what: &str) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 4 || dims[1..] != [BLOCK_CHANNELS, AD_SIZE, AD_SIZE] {
        return Err(Error::Shape(format!("{what} has shape {dims:?}, expected [N, 2, 32, 32]")));
    }
    Ok(())
}

/// Two (ResNet block + downsample) stages: `[N, 2, 32, 32] -> [N, D, 8, 8]`.
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<(ResBlock, Downsample)>,
}

impl Encoder {
    pub fn new(b: &mut Builder, arch: &ArchDescriptor) -> Result<Self> {
        b.scope("encoder", |b| {
            let mut c_in = BLOCK_CHANNELS;
            let mut stages = Vec::new();
            for (i, &w) in arch.encoder_widths.iter().enumerate() {
                let res = ResBlock::new(b, &format!("res{i}"), c_in, w, arch.groups, None)?;
                let down = Downsample::new(b, &format!("down{i}"), w, w)?;
                stages.push((res, down));
                c_in = w;
            }
            Ok(Self { stages })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_block_input(x, "encoder input")?;
        let mut h = x.clone();
        for (res, down) in &self.stages {
            h = down.forward(&res.forward(&h, None)?)?;
        }
        Ok(h)
    }
}

/// Two (ResNet block + upsample) stages turning the dequantized code into
/// 32x32 conditioning features: `[N, D, 8, 8] -> [N, cond, 32, 32]`.
#[derive(Debug, Clone)]
pub struct UpProjection {
    stages: Vec<(ResBlock, Upsample)>,
}

impl UpProjection {
    pub fn new(b: &mut Builder, arch: &ArchDescriptor) -> Result<Self> {
        b.scope("upproj", |b| {
            let widths = [arch.upproj_width, arch.cond_channels];
            let mut c_in = arch.code_dim();
            let mut stages = Vec::new();
            for (i, &w) in widths.iter().enumerate() {
                let res = ResBlock::new(b, &format!("res{i}"), c_in, w, arch.groups, None)?;
                let up = Upsample::new(b, &format!("up{i}"), w, w)?;
                stages.push((res, up));
                c_in = w;
            }
            Ok(Self { stages })
        })
    }

    pub fn forward(&self, code: &Tensor) -> Result<Tensor> {
        let mut h = code.clone();
        for (res, up) in &self.stages {
            h = up.forward(&res.forward(&h, None)?)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    res: ResBlock,
    up: Option<Upsample>,
}

/// Conditional U-Net predicting the clean target from `(z_t, features, y, t)`.
#[derive(Debug, Clone)]
pub struct UNet {
    arch: ArchDescriptor,
    time: TimeEmbedding,
    init: Conv2d,
    down: Vec<(ResBlock, Option<Downsample>)>,
    mid1: ResBlock,
    mid_attn: LinearAttention,
    mid2: ResBlock,
    up: Vec<UpStage>,
    out: Conv2d,
}

impl UNet {
    pub fn new(b: &mut Builder, arch: &ArchDescriptor) -> Result<Self> {
        b.scope("unet", |b| {
            let g = arch.groups;
            let tdim = arch.time_dim();
            let widths: Vec<usize> = arch.unet_mults.iter().map(|m| m * arch.unet_base).collect();
            let last = widths.len() - 1;
            let time = TimeEmbedding::new(b, "time", arch.time_freqs, tdim)?;
            let init = Conv2d::new(b, "init", arch.unet_in_channels(), arch.unet_base, 3, 1)?;
            let mut down = Vec::new();
            let mut c = arch.unet_base;
            for (i, &w) in widths.iter().enumerate() {
                let res = ResBlock::new(b, &format!("down{i}.res"), c, w, g, Some(tdim))?;
                let ds = if i < last { Some(Downsample::new(b, &format!("down{i}.down"), w, w)?) } else { None };
                down.push((res, ds));
                c = w;
            }
            let mid1 = ResBlock::new(b, "mid1", c, c, g, Some(tdim))?;
            let mid_attn = LinearAttention::new(b, "mid_attn", c, g, arch.attn_heads, arch.attn_head_dim)?;
            let mid2 = ResBlock::new(b, "mid2", c, c, g, Some(tdim))?;
            let mut up = Vec::new();
            for i in (0..widths.len()).rev() {
                let res = ResBlock::new(b, &format!("up{i}.res"), c + widths[i], widths[i], g, Some(tdim))?;
                let us = if i > 0 { Some(Upsample::new(b, &format!("up{i}.up"), widths[i], widths[i - 1])?) } else { None };
                up.push(UpStage { res, up: us });
                c = if i > 0 { widths[i - 1] } else { widths[0] };
            }
            let out = Conv2d::zeroed(b, "out", widths[0], BLOCK_CHANNELS, 1)?;
            Ok(Self { arch: arch.clone(), time, init, down, mid1, mid_attn, mid2, up, out })
        })
    }

    /// `z_t`: `[N, 2, 32, 32]`; `features`: `[N, cond, 32, 32]`; `side`:
    /// `[N, 2, 32, 32]` iff the architecture uses side information; `steps`:
    /// one diffusion step per batch element.
    pub fn forward(&self, z_t: &Tensor, features: &Tensor, side: Option<&Tensor>, steps: &[usize]) -> Result<Tensor> {
        check_block_input(z_t, "noisy target")?;
        let n = z_t.dim(0)?;
        let fd = features.dims();
        if fd.len() != 4 || fd[0] != n || fd[1..] != [self.arch.cond_channels, AD_SIZE, AD_SIZE] {
            return Err(Error::Shape(format!("conditioning features have shape {fd:?}")));
        }
        if steps.len() != n {
            return Err(Error::Shape(format!("{} steps for a batch of {n}", steps.len())));
        }
        let mut inputs = vec![z_t.clone(), features.clone()];
        match (self.arch.side_info, side) {
            (true, Some(y)) => {
                check_block_input(y, "side information")?;
                if y.dim(0)? != n {
                    return Err(Error::Shape("side information batch size differs".into()));
                }
                inputs.push(y.clone());
            }
            (false, None) => {}
            (true, None) => return Err(Error::Shape("model expects side information".into())),
            (false, Some(_)) => return Err(Error::Shape("model was built without side information".into())),
        }
        let x = Tensor::cat(&inputs, 1)?;
        let temb = self.time.forward(steps, x.dtype(), x.device())?;

        let mut h = self.init.forward(&x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (res, ds) in &self.down {
            h = res.forward(&h, Some(&temb))?;
            skips.push(h.clone());
            if let Some(ds) = ds {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, Some(&temb))?;
        h = self.mid_attn.forward(&h)?;
        h = self.mid2.forward(&h, Some(&temb))?;
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            h = stage.res.forward(&Tensor::cat(&[&h, &skip], 1)?, Some(&temb))?;
            if let Some(us) = &stage.up {
                h = us.forward(&h)?;
            }
        }
        self.out.forward(&h)
    }
}

/// Reshapes an encoder output `[N, D, 8, 8]` to `[N, 64, D]` (row-major grid).
pub fn grid_to_vectors(code: &Tensor) -> Result<Tensor> {
    let (n, d, h, w) = code.dims4()?;
    if (h, w) != (CODE_GRID, CODE_GRID) {
        return Err(Error::Shape(format!("code grid is {h}x{w}, expected 8x8")));
    }
    Ok(code.reshape((n, d, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`grid_to_vectors`].
pub fn vectors_to_grid(vectors: &Tensor) -> Result<Tensor> {
    let (n, p, d) = vectors.dims3()?;
    if p != CODE_GRID * CODE_GRID {
        return Err(Error::Shape(format!("{p} code vectors, expected 64")));
    }
    Ok(vectors.transpose(1, 2)?.contiguous()?.reshape((n, d, CODE_GRID, CODE_GRID))?)
}

/// Sum of all entries, used by gradient checks and probes.
pub fn total(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_all()?.sum(D::Minus1)?)
}

/// The networks of one codec built from a shared parameter store.
#[derive(Debug, Clone)]
pub struct Networks {
    pub encoder: Encoder,
    pub upproj: UpProjection,
    pub unet: UNet,
}

impl Networks {
    pub fn build(arch: &ArchDescriptor, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder::new(store, rng);
        Ok(Self { encoder: Encoder::new(&mut b, arch)?, upproj: UpProjection::new(&mut b, arch)?, unet: UNet::new(&mut b, arch)? })
    }
}
