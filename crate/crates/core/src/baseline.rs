//! Uniform-quantization autoencoder baseline: a convolutional encoder with a
//! tanh-bounded latent, per-element mid-rise quantization and a residual
//! refinement decoder that can take side information.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{blocks_to_tensor, tensor_to_blocks};
use crate::nn::{silu, Builder, Conv2d, Linear, ParamStore, BLOCK_CHANNELS};
use crate::rng::{self, Domain};
use crate::transform::{AngularDelayBlock, Normalizer};
use crate::vq::{BitString, Container, ContainerKind};
use crate::AD_SIZE;

const FLAT: usize = BLOCK_CHANNELS * AD_SIZE * AD_SIZE;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Continuous latent dimension.
    pub n_clf: usize,
    pub bits_per_element: usize,
    pub use_side_info: bool,
    /// Hidden channels of the encoder and refinement convolutions.
    pub width: usize,
    /// Number of residual refinement blocks in the decoder.
    pub refine_blocks: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { n_clf: 22, bits_per_element: 6, use_side_info: false, width: 16, refine_blocks: 2 }
    }
}

impl BaselineConfig {
    pub fn rate_bits(&self) -> usize {
        self.n_clf * self.bits_per_element
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clf == 0 {
            return Err(Error::Config("n_clf must be at least 1".into()));
        }
        if !(1..=16).contains(&self.bits_per_element) {
            return Err(Error::Config(format!("bits_per_element must be in 1..=16, got {}", self.bits_per_element)));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mid-rise uniform quantizer on [-1, 1]. Returns the level index and the
/// reconstruction value; inputs outside the range are clamped.
pub fn uniform_quantize(v: f32, bits: usize) -> (u32, f32) {
    let levels = 1u32 << bits;
    let l = ((v.clamp(-1.0, 1.0) as f64 + 1.0) / 2.0 * levels as f64).floor();
    let level = (l.max(0.0) as u32).min(levels - 1);
    (level, uniform_dequantize(level, bits))
}

pub fn uniform_dequantize(level: u32, bits: usize) -> f32 {
    ((level as f64 + 0.5) / (1u64 << bits) as f64 * 2.0 - 1.0) as f32
}

#[derive(Debug, Clone)]
struct RefineBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl RefineBlock {
    fn new(b: &mut Builder, name: &str, c_in: usize, width: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self { conv1: Conv2d::new(b, "conv1", c_in, width, 3, 1)?, conv2: Conv2d::new(b, "conv2", width, BLOCK_CHANNELS, 3, 1)? })
        })
    }

    fn forward(&self, h: &Tensor, side: Option<&Tensor>) -> Result<Tensor> {
        let input = match side {
            Some(y) => Tensor::cat(&[h, y], 1)?,
            None => h.clone(),
        };
        let r = self.conv2.forward(&silu(&self.conv1.forward(&input)?)?)?;
        Ok((h + r)?)
    }
}

#[derive(Debug, Clone)]
pub struct BaselineCodec {
    config: BaselineConfig,
    normalizer: Normalizer,
    store: ParamStore,
    enc_conv1: Conv2d,
    enc_conv2: Conv2d,
    enc_dense: Linear,
    dec_dense: Linear,
    refine: Vec<RefineBlock>,
}

impl BaselineCodec {
    pub fn new(config: BaselineConfig, normalizer: Normalizer, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let mut rng = rng::stream(seed, Domain::ParamInit, 0);
        let mut b = Builder::new(&mut store, &mut rng);
        let w = config.width;
        let enc_conv1 = Conv2d::new(&mut b, "enc.conv1", BLOCK_CHANNELS, w, 3, 1)?;
        let enc_conv2 = Conv2d::new(&mut b, "enc.conv2", w, BLOCK_CHANNELS, 3, 1)?;
        let enc_dense = Linear::new(&mut b, "enc.dense", FLAT, config.n_clf)?;
        let dec_dense = Linear::new(&mut b, "dec.dense", config.n_clf, FLAT)?;
        let c_in = if config.use_side_info { 2 * BLOCK_CHANNELS } else { BLOCK_CHANNELS };
        let refine = (0..config.refine_blocks)
            .map(|i| RefineBlock::new(&mut b, &format!("dec.refine{i}"), c_in, w))
            .collect::<Result<_>>()?;
        Ok(Self { config, normalizer, store, enc_conv1, enc_conv2, enc_dense, dec_dense, refine })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn rate_bits(&self) -> usize {
        self.config.rate_bits()
    }

    pub fn uses_side_info(&self) -> bool {
        self.config.use_side_info
    }

    pub fn to_input(&self, blocks: &[&AngularDelayBlock]) -> Result<Tensor> {
        blocks_to_tensor(blocks, &self.normalizer, self.dtype(), self.store.device())
    }

    /// Continuous latent in [-1, 1], shape `[N, n_clf]`.
    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.enc_conv2.forward(&silu(&self.enc_conv1.forward(x)?)?)?;
        Ok(self.enc_dense.forward(&h.flatten_from(1)?)?.tanh()?)
    }

    /// Quantizes a latent. Returns the level indices per sample and the
    /// straight-through tensor `v + sg[q(v) - v]`.
    pub fn quantize(&self, v: &Tensor) -> Result<(Vec<Vec<u32>>, Tensor)> {
        let bits = self.config.bits_per_element;
        let rows: Vec<Vec<f32>> = v.to_dtype(DType::F32)?.to_vec2()?;
        let mut levels = Vec::with_capacity(rows.len());
        let mut deq = Vec::with_capacity(rows.len() * self.config.n_clf);
        for row in rows {
            let (l, d): (Vec<u32>, Vec<f32>) = row.iter().map(|&x| uniform_quantize(x, bits)).unzip();
            levels.push(l);
            deq.extend(d);
        }
        let q = Tensor::from_vec(deq, v.dims(), v.device())?.to_dtype(v.dtype())?;
        Ok((levels, (v + (q - v)?.detach())?))
    }

    fn decode_latent(&self, q: &Tensor, side: Option<&Tensor>) -> Result<Tensor> {
        let n = q.dim(0)?;
        let mut h = self.dec_dense.forward(q)?.reshape((n, BLOCK_CHANNELS, AD_SIZE, AD_SIZE))?;
        for block in &self.refine {
            h = block.forward(&h, side)?;
        }
        Ok(h.tanh()?)
    }

    fn side_tensor(&self, side: Option<&[&AngularDelayBlock]>, n: usize) -> Result<Option<Tensor>> {
        if !self.uses_side_info() {
            return Ok(None);
        }
        let side = side.ok_or_else(|| Error::Shape("model needs side information to decode".into()))?;
        if side.len() != n {
            return Err(Error::Shape(format!("{} side blocks for {n} codewords", side.len())));
        }
        Ok(Some(self.to_input(side)?))
    }

    /// Packed level indices, one bit string per block.
    pub fn encode_batch(&self, blocks: &[&AngularDelayBlock]) -> Result<Vec<BitString>> {
        let (levels, _) = self.quantize(&self.latent(&self.to_input(blocks)?)?)?;
        Ok(levels.into_iter().map(|l| BitString::pack(l, self.config.bits_per_element)).collect())
    }

    pub fn encode(&self, x: &AngularDelayBlock) -> Result<BitString> {
        Ok(self.encode_batch(&[x])?.remove(0))
    }

    pub fn decode_batch(&self, codes: &[BitString], side: Option<&[&AngularDelayBlock]>) -> Result<Vec<AngularDelayBlock>> {
        let n = codes.len();
        let bits = self.config.bits_per_element;
        let mut values = Vec::with_capacity(n * self.config.n_clf);
        for code in codes {
            if code.len_bits != self.rate_bits() {
                return Err(Error::BitLength {
                    bits: code.len_bits,
                    reason: format!("baseline expects {} x {} = {} bits", self.config.n_clf, bits, self.rate_bits()),
                });
            }
            values.extend(code.unpack(bits)?.into_iter().map(|l| uniform_dequantize(l, bits)));
        }
        let q = Tensor::from_vec(values, (n, self.config.n_clf), self.store.device())?.to_dtype(self.dtype())?;
        let y = self.side_tensor(side, n)?;
        tensor_to_blocks(&self.decode_latent(&q, y.as_ref())?, &self.normalizer)
    }

    pub fn decode(&self, code: &BitString, side: Option<&AngularDelayBlock>) -> Result<AngularDelayBlock> {
        let side_vec = side.map(|s| vec![s]);
        Ok(self.decode_batch(std::slice::from_ref(code), side_vec.as_deref())?.remove(0))
    }

    pub fn container(&self, code: BitString) -> Container {
        Container { kind: ContainerKind::Uniform, param: self.config.bits_per_element as u16, bits: code }
    }

    /// Checks a container against this model and returns its payload.
    pub fn open(&self, container: Container) -> Result<BitString> {
        if container.kind != ContainerKind::Uniform {
            return Err(Error::ArchMismatch("container holds codebook indices, not a baseline codeword".into()));
        }
        if container.param as usize != self.config.bits_per_element {
            return Err(Error::ArchMismatch(format!(
                "container uses {} bits per element, model uses {}",
                container.param, self.config.bits_per_element
            )));
        }
        Ok(container.bits)
    }

    /// Per-sample squared error summed over entries, averaged over the batch.
    pub fn loss(&self, x: &Tensor, y: Option<&Tensor>, z: &Tensor) -> Result<Tensor> {
        let (_, q) = self.quantize(&self.latent(x)?)?;
        let y = if self.uses_side_info() { Some(y.ok_or_else(|| Error::Shape("batch lacks side information".into()))?) } else { None };
        let out = self.decode_latent(&q, y)?;
        Ok((z - out)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?.mean_all()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn block(seed: u64) -> AngularDelayBlock {
        let mut r = rng::stream(seed, Domain::Sample, 0);
        AngularDelayBlock::new((0..2048).map(|_| r.random_range(-0.5..0.5)).collect()).unwrap()
    }

    #[test]
    fn quantizer_examples() {
        assert_eq!(uniform_quantize(-1.0, 6), (0, -0.984375));
        assert_eq!(uniform_quantize(0.0, 6), (32, 0.015625));
        assert_eq!(uniform_quantize(1.0, 6).0, 63);
        assert_eq!(uniform_quantize(7.0, 6), uniform_quantize(1.0, 6));
        assert_eq!(uniform_quantize(-3.0, 2), (0, -0.75));
    }

    #[test]
    fn quantizer_error_bound() {
        for bits in [1, 3, 6] {
            let bound = 1.0 / (1u32 << bits) as f32;
            for i in 0..=4000 {
                let v = -1.0 + i as f32 / 2000.0;
                let (_, d) = uniform_quantize(v, bits);
                assert!((v - d).abs() <= bound + 1e-6, "bits {bits} v {v}");
            }
        }
    }

    #[test]
    fn rate_and_determinism() {
        let codec = BaselineCodec::new(BaselineConfig::default(), Normalizer { scale: 0.5 }, 1, DType::F32).unwrap();
        assert_eq!(codec.rate_bits(), 132);
        let a = codec.encode(&block(1)).unwrap();
        assert_eq!(a.len_bits, 132);
        assert_eq!(a, codec.encode(&block(1)).unwrap());
        let out = codec.decode(&a, None).unwrap();
        assert!(out.data.iter().all(|v| v.abs() <= 0.5 + 1e-6));
    }

    #[test]
    fn wrong_length_and_missing_side_info() {
        let cfg = BaselineConfig { use_side_info: true, ..BaselineConfig::default() };
        let codec = BaselineCodec::new(cfg, Normalizer::default(), 1, DType::F32).unwrap();
        let short = BitString::pack(vec![0; 21], 6);
        assert!(matches!(codec.decode(&short, Some(&block(2))), Err(Error::BitLength { .. })));
        let ok = codec.encode(&block(2)).unwrap();
        assert!(codec.decode(&ok, None).is_err());
        assert!(codec.decode(&ok, Some(&block(3))).is_ok());
    }

    #[test]
    fn straight_through_passes_identity_gradient() {
        let codec = BaselineCodec::new(BaselineConfig { n_clf: 5, ..BaselineConfig::default() }, Normalizer::default(), 1, DType::F64).unwrap();
        let v = candle_core::Var::new(&[[0.1f64, -0.7, 0.33, 0.9, -0.02]], &Device::Cpu).unwrap();
        let (_, q) = codec.quantize(v.as_tensor()).unwrap();
        let w = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0, 5.0]], &Device::Cpu).unwrap();
        let grads = (q * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g: Vec<Vec<f64>> = grads.get(v.as_tensor()).unwrap().to_vec2().unwrap();
        assert_eq!(g[0], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
