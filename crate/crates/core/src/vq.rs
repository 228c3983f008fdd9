//! Codebook vector quantization, codeword bit packing and the codeword
//! container format.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::CODE_VECTORS;

/// Returns `log2(n)` for a power of two `n >= 2`.
fn index_width(n_vectors: usize) -> Result<usize> {
    if n_vectors < 2 || !n_vectors.is_power_of_two() {
        return Err(Error::Config(format!("codebook size {n_vectors} is not a power of two >= 2")));
    }
    Ok(n_vectors.trailing_zeros() as usize)
}

/// Codeword length in bits for a codebook of `n_vectors` entries.
pub fn rate_for(n_vectors: usize) -> Result<usize> {
    Ok(CODE_VECTORS * index_width(n_vectors)?)
}

/// The trainable quantization alphabet: `n_vectors` rows of `dim` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub n_vectors: usize,
    pub dim: usize,
    pub vectors: Vec<f32>,
}

impl Codebook {
    pub fn new(n_vectors: usize, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        index_width(n_vectors)?;
        if vectors.len() != n_vectors * dim {
            return Err(Error::Shape(format!(
                "codebook has {} entries, expected {n_vectors} x {dim}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook contains non-finite entries".into()));
        }
        Ok(Self { n_vectors, dim, vectors })
    }

    /// Draws entries uniformly from `[-1/n_vectors, 1/n_vectors]`.
    pub fn random(n_vectors: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / n_vectors as f32;
        let vectors = (0..n_vectors * dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(n_vectors, dim, vectors)
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest entry in L2 distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.n_vectors {
            let d: f64 = self.vector(i).iter().zip(v).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn rate_bits(&self) -> usize {
        // n_vectors was validated at construction.
        CODE_VECTORS * self.n_vectors.trailing_zeros() as usize
    }
}

/// The encoder output: 64 vectors of `dim` entries, row-major over the 8x8 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousCode {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl ContinuousCode {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CODE_VECTORS * dim {
            return Err(Error::Shape(format!("code has {} entries, expected 64 x {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Packed codeword bits, most significant bit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitString {
    pub bytes: Vec<u8>,
    pub len_bits: usize,
}

impl BitString {
    /// Concatenates `values`, each written as `width` bits, MSB first. Trailing
    /// padding bits are zero.
    pub fn pack(values: impl IntoIterator<Item = u32>, width: usize) -> Self {
        let mut bytes = Vec::new();
        let mut len_bits = 0;
        for v in values {
            for b in (0..width).rev() {
                if len_bits % 8 == 0 {
                    bytes.push(0);
                }
                if (v >> b) & 1 == 1 {
                    *bytes.last_mut().unwrap() |= 0x80 >> (len_bits % 8);
                }
                len_bits += 1;
            }
        }
        Self { bytes, len_bits }
    }

    /// Splits the bit string into `width`-bit values.
    pub fn unpack(&self, width: usize) -> Result<Vec<u32>> {
        if width == 0 || self.len_bits % width != 0 {
            return Err(Error::BitLength {
                bits: self.len_bits,
                reason: format!("not a multiple of the {width}-bit field width"),
            });
        }
        if self.bytes.len() != self.len_bits.div_ceil(8) {
            return Err(Error::BitLength { bits: self.len_bits, reason: format!("{} payload bytes", self.bytes.len()) });
        }
        let bit = |i: usize| (self.bytes[i / 8] >> (7 - i % 8)) & 1;
        Ok((0..self.len_bits / width)
            .map(|k| (0..width).fold(0u32, |acc, j| (acc << 1) | bit(k * width + j) as u32))
            .collect())
    }
}

/// An ordered list of codebook indices together with the codebook size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codeword {
    pub n_vectors: usize,
    pub indices: Vec<u32>,
}

impl Codeword {
    pub fn new(n_vectors: usize, indices: Vec<u32>) -> Result<Self> {
        index_width(n_vectors)?;
        if indices.len() != CODE_VECTORS {
            return Err(Error::Shape(format!("codeword has {} indices, expected 64", indices.len())));
        }
        if let Some(&i) = indices.iter().find(|&&i| i as usize >= n_vectors) {
            return Err(Error::IndexOutOfRange { index: i as usize, size: n_vectors });
        }
        Ok(Self { n_vectors, indices })
    }

    pub fn to_bits(&self) -> BitString {
        // Validated at construction.
        pack_bits(&self.indices, self.n_vectors).expect("codeword indices in range")
    }

    pub fn from_bits(bits: &BitString, n_vectors: usize) -> Result<Self> {
        let expected = rate_for(n_vectors)?;
        if bits.len_bits != expected {
            return Err(Error::BitLength {
                bits: bits.len_bits,
                reason: format!("a {n_vectors}-entry codebook needs {expected} bits"),
            });
        }
        Self::new(n_vectors, unpack_bits(bits, n_vectors)?)
    }
}

/// Packs indices at `log2(n_vectors)` bits each.
pub fn pack_bits(indices: &[u32], n_vectors: usize) -> Result<BitString> {
    let width = index_width(n_vectors)?;
    if let Some(&i) = indices.iter().find(|&&i| i as usize >= n_vectors) {
        return Err(Error::IndexOutOfRange { index: i as usize, size: n_vectors });
    }
    Ok(BitString::pack(indices.iter().copied(), width))
}

pub fn unpack_bits(bits: &BitString, n_vectors: usize) -> Result<Vec<u32>> {
    bits.unpack(index_width(n_vectors)?)
}

/// Maps each of the 64 vectors to its nearest codebook entry. Returns the
/// codeword and the selected embeddings.
pub fn quantize(code: &ContinuousCode, book: &Codebook) -> Result<(Codeword, ContinuousCode)> {
    if code.dim != book.dim {
        return Err(Error::Shape(format!("code dimension {} vs codebook dimension {}", code.dim, book.dim)));
    }
    let indices: Vec<u32> = (0..CODE_VECTORS).map(|i| book.nearest(code.vector(i)) as u32).collect();
    let e = dequantize_indices(&indices, book);
    Ok((Codeword { n_vectors: book.n_vectors, indices }, e))
}

fn dequantize_indices(indices: &[u32], book: &Codebook) -> ContinuousCode {
    let data = indices.iter().flat_map(|&i| book.vector(i as usize).iter().copied()).collect();
    ContinuousCode { dim: book.dim, data }
}

/// Looks up the embeddings a codeword selects.
pub fn dequantize(codeword: &Codeword, book: &Codebook) -> Result<ContinuousCode> {
    if codeword.n_vectors != book.n_vectors {
        return Err(Error::ArchMismatch(format!(
            "codeword built for {} codebook entries, codebook has {}",
            codeword.n_vectors, book.n_vectors
        )));
    }
    Ok(dequantize_indices(&codeword.indices, book))
}

/// Codebook loss `||sg[c] - e||^2 + ||c - sg[e]||^2`, summed over entries and
/// averaged over the leading batch dimension. The first term only reaches
/// the codebook, the second only the encoder.
pub fn codebook_loss(c_conti: &Tensor, e: &Tensor) -> Result<Tensor> {
    let batch = c_conti.dim(0)? as f64;
    let to_book = (c_conti.detach() - e)?.sqr()?.sum_all()?;
    let to_encoder = (c_conti - e.detach())?.sqr()?.sum_all()?;
    Ok(((to_book + to_encoder)? / batch)?)
}

/// Straight-through quantizer output `c + sg[e - c]`: equal to `e` in the
/// forward pass, identity Jacobian with respect to `c` in the backward pass.
pub fn straight_through(c_conti: &Tensor, e: &Tensor) -> Result<Tensor> {
    Ok((c_conti + (e - c_conti)?.detach())?)
}

// ---------------------------------------------------------------------------
// Codeword container

/// What a codeword container holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    /// Codebook indices; the parameter field is the codebook size.
    Codebook,
    /// Uniformly quantized latents; the parameter field is bits per element.
    Uniform,
}

impl ContainerKind {
    fn magic(self) -> &'static [u8; 4] {
        match self {
            ContainerKind::Codebook => b"CSIC",
            ContainerKind::Uniform => b"CSIU",
        }
    }
}

pub const CONTAINER_VERSION: u16 = 1;
/// Bytes before the payload: magic, version, parameter, bit length.
pub const CONTAINER_HEADER_BYTES: usize = 12;

/// A serialized codeword: `magic | version u16 | param u16 | len_bits u32 |
/// payload`, integers little-endian, payload zero-padded to a byte boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub kind: ContainerKind,
    pub param: u16,
    pub bits: BitString,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CONTAINER_HEADER_BYTES + self.bits.bytes.len());
        out.extend_from_slice(self.kind.magic());
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&self.param.to_le_bytes());
        out.extend_from_slice(&(self.bits.len_bits as u32).to_le_bytes());
        out.extend_from_slice(&self.bits.bytes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CONTAINER_HEADER_BYTES {
            return Err(Error::MalformedHeader(format!("container is {} bytes", bytes.len())));
        }
        let kind = match &bytes[..4] {
            b"CSIC" => ContainerKind::Codebook,
            b"CSIU" => ContainerKind::Uniform,
            m => return Err(Error::MalformedHeader(format!("bad container magic {m:?}"))),
        };
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CONTAINER_VERSION {
            return Err(Error::Version { found: version, expected: CONTAINER_VERSION });
        }
        let param = u16::from_le_bytes([bytes[6], bytes[7]]);
        let len_bits = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[CONTAINER_HEADER_BYTES..];
        if payload.len() != len_bits.div_ceil(8) {
            return Err(Error::SizeMismatch {
                expected: (CONTAINER_HEADER_BYTES + len_bits.div_ceil(8)) as u64,
                actual: bytes.len() as u64,
            });
        }
        Ok(Self { kind, param, bits: BitString { bytes: payload.to_vec(), len_bits } })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;
    use rand::Rng;

    fn two_point_book() -> Codebook {
        Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn nearest_and_tie_break() {
        let book = two_point_book();
        assert_eq!(book.nearest(&[0.9, 0.8]), 1);
        assert_eq!(book.nearest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn pack_example_byte() {
        let bits = pack_bits(&[0, 1, 2, 3], 4).unwrap();
        assert_eq!(bits.bytes, vec![0x1B]);
        assert_eq!(bits.len_bits, 8);
    }

    #[test]
    fn binary_codebook_is_eight_bytes() {
        let cw = Codeword::new(2, vec![1; 64]).unwrap();
        let bits = cw.to_bits();
        assert_eq!(bits.len_bits, 64);
        assert_eq!(bits.bytes, vec![0xFF; 8]);
    }

    #[test]
    fn rates() {
        assert_eq!(rate_for(2).unwrap(), 64);
        assert_eq!(rate_for(4).unwrap(), 128);
        assert_eq!(rate_for(8).unwrap(), 192);
        assert!(matches!(rate_for(6), Err(Error::Config(_))));
        assert!(matches!(rate_for(1), Err(Error::Config(_))));
    }

    #[test]
    fn packing_errors() {
        assert!(matches!(pack_bits(&[4], 4), Err(Error::IndexOutOfRange { index: 4, size: 4 })));
        let bits = BitString { bytes: vec![0xFF], len_bits: 7 };
        assert!(matches!(unpack_bits(&bits, 4), Err(Error::BitLength { .. })));
        let bits = BitString { bytes: vec![0; 16], len_bits: 128 };
        assert!(matches!(Codeword::from_bits(&bits, 2), Err(Error::BitLength { .. })));
    }

    #[test]
    fn quantize_dimension_mismatch() {
        let code = ContinuousCode::new(3, vec![0.0; 192]).unwrap();
        assert!(matches!(quantize(&code, &two_point_book()), Err(Error::Shape(_))));
    }

    #[test]
    fn quantize_is_idempotent() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for n_v in [2, 8, 32] {
            let book = Codebook::random(n_v, 16, &mut rng).unwrap();
            let data = (0..64 * 16).map(|_| rng.random_range(-0.2f32..0.2)).collect();
            let code = ContinuousCode::new(16, data).unwrap();
            let (cw, e) = quantize(&code, &book).unwrap();
            let (cw2, e2) = quantize(&e, &book).unwrap();
            assert_eq!(cw, cw2);
            assert_eq!(e, e2);
            assert_eq!(dequantize(&cw, &book).unwrap(), e);
        }
    }

    #[test]
    fn codebook_loss_values_and_gradients() {
        let dev = Device::Cpu;
        let c = Var::from_vec(vec![1.0f64, 0.0], (1, 2), &dev).unwrap();
        let e = Var::from_vec(vec![0.0f64, 0.0], (1, 2), &dev).unwrap();
        let loss = codebook_loss(c.as_tensor(), e.as_tensor()).unwrap();
        assert_eq!(loss.to_scalar::<f64>().unwrap(), 2.0);
        let grads = loss.backward().unwrap();
        // d/dc of the second term only: 2 (c - e).
        let gc: Vec<f64> = grads.get(c.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(gc, vec![2.0, 0.0]);
        // d/de of the first term only: -2 (c - e).
        let ge: Vec<f64> = grads.get(e.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(ge, vec![-2.0, 0.0]);

        let same = codebook_loss(c.as_tensor(), c.as_tensor()).unwrap();
        assert_eq!(same.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn straight_through_forward_value() {
        let dev = Device::Cpu;
        let c = Tensor::new(&[[0.3f32, -0.2]], &dev).unwrap();
        let e = Tensor::new(&[[1.0f32, 1.0]], &dev).unwrap();
        let st = straight_through(&c, &e).unwrap();
        assert_eq!(st.to_dtype(DType::F32).unwrap().to_vec2::<f32>().unwrap(), vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn container_layout() {
        let cw = Codeword::new(8, (0..64).map(|i| i % 8).collect()).unwrap();
        let c = Container { kind: ContainerKind::Codebook, param: 8, bits: cw.to_bits() };
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"CSIC");
        assert_eq!(bytes.len(), CONTAINER_HEADER_BYTES + 24);
        assert_eq!(&bytes[6..8], &8u16.to_le_bytes());
        assert_eq!(&bytes[8..12], &192u32.to_le_bytes());
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::MalformedHeader(_))));
        assert!(matches!(Container::from_bytes(&bytes[..20]), Err(Error::SizeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(log_nv in 1u32..=4, seed in any::<u64>()) {
            use rand::SeedableRng;
            let n_v = 1usize << log_nv;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let indices: Vec<u32> = (0..64).map(|_| rng.random_range(0..n_v as u32)).collect();
            let bits = pack_bits(&indices, n_v).unwrap();
            prop_assert_eq!(bits.len_bits, 64 * log_nv as usize);
            prop_assert_eq!(unpack_bits(&bits, n_v).unwrap(), indices);
        }

        #[test]
        fn quantization_picks_minimum_distance(seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let book = Codebook::random(8, 4, &mut rng).unwrap();
            let code = ContinuousCode::new(4, (0..256).map(|_| rng.random_range(-0.3f32..0.3)).collect()).unwrap();
            let (cw, _) = quantize(&code, &book).unwrap();
            let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>();
            for (i, &k) in cw.indices.iter().enumerate() {
                let chosen = dist(code.vector(i), book.vector(k as usize));
                for j in 0..8 {
                    prop_assert!(chosen <= dist(code.vector(i), book.vector(j)));
                }
            }
        }
    }
}
