//! The assembled diffusion codec: encoder, codebook, up-projection and
//! conditional U-Net sharing one parameter store.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{self, ArchDescriptor, Builder, Networks, ParamStore};
use crate::rng::{self, Domain};
use crate::transform::{denormalize, AngularDelayBlock, Normalizer};
use crate::vq::{self, Codebook, Codeword, ContinuousCode};
use crate::{AD_SIZE, CODE_VECTORS};

/// Name of the codebook parameter in the store.
pub const CODEBOOK_PARAM: &str = "codebook";

/// Everything needed to rebuild a diffusion codec's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub arch: ArchDescriptor,
    pub n_vectors: usize,
    pub steps: usize,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone)]
pub struct DiffusionCodec {
    spec: DiffusionSpec,
    store: ParamStore,
    nets: Networks,
    codebook: Tensor,
    schedule: NoiseSchedule,
}

/// The three terms of the training objective, as graph tensors.
pub struct LossParts {
    pub total: Tensor,
    pub denoise: Tensor,
    pub codebook: Tensor,
    /// Codewords selected for the batch (for usage statistics).
    pub codewords: Vec<Codeword>,
}

/// Stacks blocks into a normalized `[N, 2, 32, 32]` tensor.
pub fn blocks_to_tensor(
    blocks: &[&AngularDelayBlock],
    normalizer: &Normalizer,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(blocks.len() * AngularDelayBlock::LEN);
    for b in blocks {
        data.extend(normalizer.normalize(b).to_planar());
    }
    Ok(Tensor::from_vec(data, (blocks.len(), 2, AD_SIZE, AD_SIZE), device)?.to_dtype(dtype)?)
}

/// Splits a normalized `[N, 2, 32, 32]` tensor into blocks in physical units.
pub fn tensor_to_blocks(t: &Tensor, normalizer: &Normalizer) -> Result<Vec<AngularDelayBlock>> {
    let n = t.dim(0)?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    flat.chunks_exact(AngularDelayBlock::LEN)
        .take(n)
        .map(|c| Ok(denormalize(&AngularDelayBlock::from_planar(c, normalizer.scale)?)))
        .collect()
}

impl DiffusionCodec {
    pub fn new(spec: DiffusionSpec, seed: u64, dtype: DType) -> Result<Self> {
        let schedule = NoiseSchedule::cosine(spec.steps)?;
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let mut init_rng = rng::stream(seed, Domain::ParamInit, 0);
        let nets = Networks::build(&spec.arch, &mut store, &mut init_rng)?;
        let mut book_rng = rng::stream(seed, Domain::Codebook, 0);
        let book = Codebook::random(spec.n_vectors, spec.arch.code_dim(), &mut book_rng)?;
        let codebook = Builder::new(&mut store, &mut init_rng).values(
            CODEBOOK_PARAM,
            &[book.n_vectors, book.dim],
            book.vectors.iter().map(|&v| v as f64).collect(),
        )?;
        Ok(Self { spec, store, nets, codebook, schedule })
    }

    pub fn spec(&self) -> &DiffusionSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.spec.normalizer
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn uses_side_info(&self) -> bool {
        self.spec.arch.side_info
    }

    pub fn rate_bits(&self) -> usize {
        CODE_VECTORS * self.spec.n_vectors.trailing_zeros() as usize
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    /// Current codebook values.
    pub fn codebook(&self) -> Result<Codebook> {
        let v: Vec<f32> = self.codebook.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Codebook::new(self.spec.n_vectors, self.spec.arch.code_dim(), v)
    }

    pub fn codebook_tensor(&self) -> &Tensor {
        &self.codebook
    }

    pub fn to_input(&self, blocks: &[&AngularDelayBlock]) -> Result<Tensor> {
        blocks_to_tensor(blocks, &self.spec.normalizer, self.dtype(), self.device())
    }

    /// Continuous encoder output as `[N, 64, D]` vectors.
    pub fn encode_vectors(&self, x: &Tensor) -> Result<Tensor> {
        nn::grid_to_vectors(&self.nets.encoder.forward(x)?)
    }

    /// Nearest-entry quantization of `[N, 64, D]` vectors. Returns the
    /// codewords and the selected embeddings `e`, differentiable with respect
    /// to the codebook.
    pub fn quantize_vectors(&self, vectors: &Tensor) -> Result<(Vec<Codeword>, Tensor)> {
        let (n, p, d) = vectors.dims3()?;
        let book = self.codebook()?;
        let flat: Vec<f32> = vectors.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let mut codewords = Vec::with_capacity(n);
        let mut all = Vec::with_capacity(n * p);
        for chunk in flat.chunks_exact(p * d) {
            let (cw, _) = vq::quantize(&ContinuousCode::new(d, chunk.to_vec())?, &book)?;
            all.extend_from_slice(&cw.indices);
            codewords.push(cw);
        }
        let e = self.lookup(&all, n)?;
        Ok((codewords, e))
    }

    fn lookup(&self, indices: &[u32], n: usize) -> Result<Tensor> {
        let idx = Tensor::from_slice(indices, indices.len(), self.device())?;
        Ok(self.codebook.index_select(&idx, 0)?.reshape((n, CODE_VECTORS, self.spec.arch.code_dim()))?)
    }

    pub fn encode_batch(&self, blocks: &[&AngularDelayBlock]) -> Result<Vec<Codeword>> {
        let x = self.to_input(blocks)?;
        Ok(self.quantize_vectors(&self.encode_vectors(&x)?)?.0)
    }

    pub fn encode(&self, x: &AngularDelayBlock) -> Result<Codeword> {
        Ok(self.encode_batch(&[x])?.remove(0))
    }

    /// Conditioning features from quantized vectors `[N, 64, D]`.
    pub fn features(&self, quantized: &Tensor) -> Result<Tensor> {
        self.nets.upproj.forward(&nn::vectors_to_grid(quantized)?)
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

    /// Decodes a batch of codewords. Side information is required iff the
    /// model was built with it and ignored otherwise.
    pub fn decode_batch(&self, codewords: &[Codeword], side: Option<&[&AngularDelayBlock]>) -> Result<Vec<AngularDelayBlock>> {
        let n = codewords.len();
        let mut indices = Vec::with_capacity(n * CODE_VECTORS);
        for cw in codewords {
            if cw.n_vectors != self.spec.n_vectors {
                return Err(Error::ArchMismatch(format!(
                    "codeword uses a {}-entry codebook, model has {}",
                    cw.n_vectors, self.spec.n_vectors
                )));
            }
            indices.extend_from_slice(&cw.indices);
        }
        let feats = self.features(&self.lookup(&indices, n)?)?;
        let y = self.side_tensor(side, n)?;
        let unet = &self.nets.unet;
        let denoiser = |z: &Tensor, t: usize| unet.forward(z, &feats, y.as_ref(), &vec![t; n]);
        let z0 = diffusion::ddim_decode(&denoiser, &self.schedule, (n, 2, AD_SIZE, AD_SIZE), self.dtype(), self.device())?;
        tensor_to_blocks(&z0, &self.spec.normalizer)
    }

    pub fn decode(&self, codeword: &Codeword, side: Option<&AngularDelayBlock>) -> Result<AngularDelayBlock> {
        let side_vec = side.map(|s| vec![s]);
        Ok(self.decode_batch(std::slice::from_ref(codeword), side_vec.as_deref())?.remove(0))
    }

    /// Training objective for a batch of normalized tensors:
    /// `mean_i snr(t_i) ||z0_i - D(z_t_i, c_i, y_i, t_i)||^2 + eta * L_cb`.
    pub fn loss(
        &self,
        x: &Tensor,
        y: Option<&Tensor>,
        z0: &Tensor,
        steps: &[usize],
        eps: &Tensor,
        eta: f64,
    ) -> Result<LossParts> {
        let n = x.dim(0)?;
        let c = self.encode_vectors(x)?;
        let (codewords, e) = self.quantize_vectors(&c)?;
        let cb = vq::codebook_loss(&c, &e)?;
        let feats = self.features(&vq::straight_through(&c, &e)?)?;
        let z_t = diffusion::perturb_batch(z0, steps, eps, &self.schedule)?;
        let y = if self.uses_side_info() { Some(y.ok_or_else(|| Error::Shape("batch lacks side information".into()))?) } else { None };
        let pred = self.nets.unet.forward(&z_t, &feats, y, steps)?;
        let sq = (z0 - pred)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?;
        let w: Vec<f64> = steps.iter().map(|&t| self.schedule.snr(t)).collect();
        let w = Tensor::from_vec(w, n, self.device())?.to_dtype(self.dtype())?;
        let denoise = (sq * w)?.mean_all()?;
        let total = (&denoise + (&cb * eta)?)?;
        Ok(LossParts { total, denoise, codebook: cb, codewords })
    }
}
