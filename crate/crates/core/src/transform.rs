//! Spatial-frequency <-> cropped angular-delay conversion, input scaling and
//! the NMSE distortion metric.

use num_complex::{Complex32, Complex64};
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::ComplexMatrix;
use crate::error::{Error, Result};
use crate::AD_SIZE;

/// Linear NMSE values below this are clamped before conversion to dB.
pub const NMSE_FLOOR: f64 = 1e-12;

/// A cropped 32x32 angular-delay block stored as `[angle][delay][re, im]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularDelayBlock {
    pub data: Vec<f32>,
    /// Factor the data has been divided by; 1 for unnormalized blocks.
    pub scale: f32,
}

impl AngularDelayBlock {
    pub const LEN: usize = AD_SIZE * AD_SIZE * 2;

    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::Shape(format!("block has {} entries, expected {}", data.len(), Self::LEN)));
        }
        Ok(Self { data, scale: 1.0 })
    }

    pub fn zeros() -> Self {
        Self { data: vec![0.0; Self::LEN], scale: 1.0 }
    }

    /// Builds a block from 32x32 complex values in row-major order.
    pub fn from_complex(values: &[Complex32]) -> Result<Self> {
        if values.len() != AD_SIZE * AD_SIZE {
            return Err(Error::Shape(format!("expected 1024 complex values, got {}", values.len())));
        }
        Self::new(values.iter().flat_map(|v| [v.re, v.im]).collect())
    }

    pub fn to_complex(&self) -> Vec<Complex32> {
        self.data.chunks_exact(2).map(|c| Complex32::new(c[0], c[1])).collect()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-first layout `[re|im][angle][delay]`, the network's input order.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = AD_SIZE * AD_SIZE;
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            out[i] = self.data[2 * i];
            out[n + i] = self.data[2 * i + 1];
        }
        out
    }

    pub fn from_planar(planar: &[f32], scale: f32) -> Result<Self> {
        let n = AD_SIZE * AD_SIZE;
        if planar.len() != 2 * n {
            return Err(Error::Shape(format!("planar block has {} entries", planar.len())));
        }
        let data = (0..n).flat_map(|i| [planar[i], planar[n + i]]).collect();
        Ok(Self { data, scale })
    }
}

fn fft_2d(data: &mut [Complex64], rows: usize, cols: usize, direction: FftDirection) {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(cols, direction);
    for row in data.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(rows, direction);
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
    let norm = 1.0 / ((rows * cols) as f64).sqrt();
    for v in data.iter_mut() {
        *v *= norm;
    }
}

/// Unitary 2D inverse FFT over (antenna, subcarrier), returning the full
/// angular-delay matrix.
pub fn angular_delay_full(raw: &ComplexMatrix) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> =
        raw.data.iter().map(|v| Complex64::new(v.re as f64, v.im as f64)).collect();
    fft_2d(&mut buf, raw.rows, raw.cols, FftDirection::Inverse);
    buf
}

fn check_raw_shape(rows: usize, cols: usize) -> Result<()> {
    if rows != AD_SIZE {
        return Err(Error::Shape(format!("expected {AD_SIZE} antennas, got {rows}")));
    }
    if cols < AD_SIZE {
        return Err(Error::Shape(format!("need at least {AD_SIZE} subcarriers, got {cols}")));
    }
    Ok(())
}

/// Converts a 32 x N_sc matrix to its cropped angular-delay block: unitary
/// 2D IFFT, then the first 32 delay taps are kept.
pub fn to_angular_delay(raw: &ComplexMatrix) -> Result<AngularDelayBlock> {
    check_raw_shape(raw.rows, raw.cols)?;
    let full = angular_delay_full(raw);
    let mut data = Vec::with_capacity(AngularDelayBlock::LEN);
    for a in 0..AD_SIZE {
        for v in &full[a * raw.cols..a * raw.cols + AD_SIZE] {
            data.push(v.re as f32);
            data.push(v.im as f32);
        }
    }
    AngularDelayBlock::new(data)
}

/// Fraction of the delay-domain energy that survives the 32-tap crop.
pub fn retained_energy_ratio(raw: &ComplexMatrix) -> Result<f64> {
    check_raw_shape(raw.rows, raw.cols)?;
    let full = angular_delay_full(raw);
    let total: f64 = full.iter().map(|v| v.norm_sqr()).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let kept: f64 = (0..raw.rows)
        .flat_map(|a| &full[a * raw.cols..a * raw.cols + AD_SIZE])
        .map(|v| v.norm_sqr())
        .sum();
    Ok(kept / total)
}

/// Zero-pads the delay axis of `block` to `n_subcarriers` and applies the
/// unitary 2D FFT. The block's scale is applied, so normalized blocks come
/// back in physical units.
pub fn from_angular_delay(block: &AngularDelayBlock, n_subcarriers: usize) -> Result<ComplexMatrix> {
    check_raw_shape(AD_SIZE, n_subcarriers)?;
    if block.data.len() != AngularDelayBlock::LEN {
        return Err(Error::Shape(format!("block has {} entries", block.data.len())));
    }
    let scale = block.scale as f64;
    let mut buf = vec![Complex64::new(0.0, 0.0); AD_SIZE * n_subcarriers];
    for a in 0..AD_SIZE {
        for d in 0..AD_SIZE {
            let i = 2 * (a * AD_SIZE + d);
            buf[a * n_subcarriers + d] = Complex64::new(block.data[i] as f64, block.data[i + 1] as f64) * scale;
        }
    }
    fft_2d(&mut buf, AD_SIZE, n_subcarriers, FftDirection::Forward);
    Ok(ComplexMatrix {
        rows: AD_SIZE,
        cols: n_subcarriers,
        data: buf.into_iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect(),
    })
}

/// Mean over the batch of `||z - z_hat||^2 / ||z||^2`.
pub fn nmse<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f32], &'a [f32])>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (z, z_hat)) in pairs.into_iter().enumerate() {
        if z.len() != z_hat.len() {
            return Err(Error::Shape(format!("sample {i}: {} vs {} entries", z.len(), z_hat.len())));
        }
        let (mut err, mut reference) = (0.0f64, 0.0f64);
        for (&a, &b) in z.iter().zip(z_hat) {
            let d = a as f64 - b as f64;
            err += d * d;
            reference += (a as f64) * (a as f64);
        }
        if reference == 0.0 {
            return Err(Error::ZeroReference(i));
        }
        total += err / reference;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("NMSE over an empty batch".into()));
    }
    Ok(total / count as f64)
}

/// NMSE between two batches of blocks, evaluated in physical units.
pub fn nmse_blocks(z: &[AngularDelayBlock], z_hat: &[AngularDelayBlock]) -> Result<f64> {
    if z.len() != z_hat.len() {
        return Err(Error::Shape(format!("batch sizes differ: {} vs {}", z.len(), z_hat.len())));
    }
    let phys = |b: &AngularDelayBlock| -> Vec<f32> { b.data.iter().map(|v| v * b.scale).collect() };
    let z: Vec<Vec<f32>> = z.iter().map(phys).collect();
    let z_hat: Vec<Vec<f32>> = z_hat.iter().map(phys).collect();
    nmse(z.iter().map(Vec::as_slice).zip(z_hat.iter().map(Vec::as_slice)))
}

/// `10 log10` of a linear NMSE, floored at [`NMSE_FLOOR`].
pub fn nmse_db(linear: f64) -> f64 {
    10.0 * linear.max(NMSE_FLOOR).log10()
}

/// Dataset-level scaling that maps the 99.9th percentile of `|entry|` to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub scale: f32,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl Normalizer {
    pub const PERCENTILE: f64 = 0.999;

    /// Fits the scale on every entry of the given blocks. An all-zero or empty
    /// population yields scale 1.
    pub fn fit<'a>(blocks: impl IntoIterator<Item = &'a AngularDelayBlock>) -> Self {
        let mut mags: Vec<f32> = blocks.into_iter().flat_map(|b| b.data.iter().map(|v| v.abs())).collect();
        if mags.is_empty() {
            return Self::default();
        }
        // Nearest-rank percentile.
        let rank = ((Self::PERCENTILE * mags.len() as f64).ceil() as usize).clamp(1, mags.len()) - 1;
        let (_, &mut p, _) = mags.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
        if p > 0.0 && p.is_finite() {
            Self { scale: p }
        } else {
            Self::default()
        }
    }

    /// Fits on the X, Y and Z blocks of a dataset.
    pub fn fit_dataset(dataset: &crate::data::Dataset) -> Self {
        Self::fit(dataset.samples.iter().flat_map(|s| [&s.x_ad, &s.y_ad, &s.z_ad].into_iter().flatten()))
    }

    pub fn normalize(&self, block: &AngularDelayBlock) -> AngularDelayBlock {
        let phys = block.scale;
        AngularDelayBlock { data: block.data.iter().map(|v| v * phys / self.scale).collect(), scale: self.scale }
    }
}

/// Returns the block in physical units (scale 1).
pub fn denormalize(block: &AngularDelayBlock) -> AngularDelayBlock {
    AngularDelayBlock { data: block.data.iter().map(|v| v * block.scale).collect(), scale: 1.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> ComplexMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexMatrix {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        }
    }

    #[test]
    fn zeros_map_to_zeros() {
        let b = to_angular_delay(&ComplexMatrix::zeros(32, 667)).unwrap();
        assert!(b.data.iter().all(|&v| v == 0.0));
        let m = from_angular_delay(&AngularDelayBlock::zeros(), 667).unwrap();
        assert!(m.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn narrow_input_rejected() {
        assert!(matches!(to_angular_delay(&ComplexMatrix::zeros(32, 31)), Err(Error::Shape(_))));
        assert!(matches!(from_angular_delay(&AngularDelayBlock::zeros(), 16), Err(Error::Shape(_))));
    }

    #[test]
    fn sparse_pattern_recovered() {
        let mut pattern = vec![Complex32::new(0.0, 0.0); 1024];
        pattern[3 * 32 + 5] = Complex32::new(1.5, -0.5);
        pattern[17 * 32] = Complex32::new(-0.25, 2.0);
        pattern[31 * 32 + 31] = Complex32::new(0.75, 0.0);
        let block = AngularDelayBlock::from_complex(&pattern).unwrap();
        let raw = from_angular_delay(&block, 667).unwrap();
        let back = to_angular_delay(&raw).unwrap();
        let err: f64 = back.data.iter().zip(&block.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        assert!((err / block.energy()).sqrt() < 1e-5);
    }

    #[test]
    fn transform_preserves_energy() {
        let raw = random_matrix(32, 667, 1);
        let full = angular_delay_full(&raw);
        let e: f64 = full.iter().map(|v| v.norm_sqr()).sum();
        assert!((e / raw.energy() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nmse_examples() {
        let z = [1.0f32, 0.0];
        assert_eq!(nmse([(&z[..], &z[..])]).unwrap(), 0.0);
        assert_eq!(nmse_db(0.0), -120.0);
        assert_eq!(nmse([(&z[..], &[0.0f32, 0.0][..])]).unwrap(), 1.0);
        let v = nmse([(&z[..], &[0.5f32, 0.0][..])]).unwrap();
        assert_eq!(v, 0.25);
        assert!((nmse_db(v) - (-6.0206)).abs() < 1e-4);
        assert!(matches!(nmse([(&[0.0f32][..], &[1.0f32][..])]), Err(Error::ZeroReference(0))));
    }

    #[test]
    fn nmse_is_scale_invariant() {
        let z: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin()).collect();
        let zh: Vec<f32> = z.iter().map(|v| v * 0.9 + 0.01).collect();
        let a = nmse([(&z[..], &zh[..])]).unwrap();
        let z3: Vec<f32> = z.iter().map(|v| v * -3.0).collect();
        let zh3: Vec<f32> = zh.iter().map(|v| v * -3.0).collect();
        let b = nmse([(&z3[..], &zh3[..])]).unwrap();
        assert!((a - b).abs() / a < 1e-6);
    }

    #[test]
    fn normalize_roundtrip_and_zero_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = AngularDelayBlock::new((0..2048).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let norm = Normalizer::fit([&b]);
        let back = denormalize(&norm.normalize(&b));
        for (x, y) in back.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
        let z = norm.normalize(&AngularDelayBlock::zeros());
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert_eq!(z.scale, norm.scale);
        assert_eq!(Normalizer::fit([&AngularDelayBlock::zeros()]).scale, 1.0);
    }

    #[test]
    fn percentile_maps_to_one() {
        // Oracle: sort all magnitudes of the normalized data and read the
        // nearest-rank 99.9th percentile directly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blocks: Vec<_> = (0..10)
            .map(|_| AngularDelayBlock::new((0..2048).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap())
            .collect();
        let norm = Normalizer::fit(&blocks);
        let mut mags: Vec<f64> =
            blocks.iter().flat_map(|b| norm.normalize(b).data).map(|v| v.abs() as f64).collect();
        mags.sort_by(f64::total_cmp);
        let p = mags[(0.999 * mags.len() as f64).ceil() as usize - 1];
        assert!((p - 1.0).abs() < 0.01, "percentile {p}");
    }
}
