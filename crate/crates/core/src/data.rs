//! Synthetic UL/DL channel generation and the dataset file format.
//!
//! The generator is a geometric multipath model: every path has a BS-side
//! angle, a UE-side arrival angle (which sets its Doppler shift), a delay
//! and a complex gain. Uplink and downlink share the geometry and differ
//! only in the carrier used for the Doppler rotation and the array response.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::transform::{self, AngularDelayBlock};
use crate::AD_SIZE;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Simulation parameters of the synthetic channel source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub n_bs_antennas: usize,
    pub n_subcarriers: usize,
    /// Hz.
    pub subcarrier_spacing: f64,
    pub n_paths: usize,
    /// Mean excess delay of the exponential delay profile, seconds.
    pub delay_spread: f64,
    /// Hz.
    pub dl_carrier: f64,
    /// Hz.
    pub ul_carrier: f64,
    /// m/s.
    pub ue_speed: f64,
    /// Seconds between consecutive snapshots.
    pub slot_interval: f64,
    pub n_slots: usize,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            n_bs_antennas: 32,
            n_subcarriers: 667,
            subcarrier_spacing: 15e3,
            n_paths: 24,
            delay_spread: 300e-9,
            dl_carrier: 2.11e9,
            ul_carrier: 1.91e9,
            ue_speed: 5.0,
            slot_interval: 5e-3,
            n_slots: 71,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_bs_antennas", self.n_bs_antennas),
            ("n_subcarriers", self.n_subcarriers),
            ("n_paths", self.n_paths),
            ("n_slots", self.n_slots),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let positive = [
            ("subcarrier_spacing", self.subcarrier_spacing),
            ("delay_spread", self.delay_spread),
            ("dl_carrier", self.dl_carrier),
            ("ul_carrier", self.ul_carrier),
            ("slot_interval", self.slot_interval),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        // Speed may be exactly zero (static UE) but not negative.
        if !(self.ue_speed.is_finite() && self.ue_speed >= 0.0) {
            return Err(Error::Config(format!("ue_speed must be non-negative, got {}", self.ue_speed)));
        }
        Ok(())
    }

    /// Delay resolution of the subcarrier grid, in seconds per tap.
    pub fn tap_duration(&self) -> f64 {
        1.0 / (self.n_subcarriers as f64 * self.subcarrier_spacing)
    }
}

/// Dense row-major complex matrix (antennas x subcarriers).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex32>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex32::new(0.0, 0.0); rows * cols] }
    }

    pub fn get(&self, r: usize, c: usize) -> Complex32 {
        self.data[r * self.cols + c]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr() as f64).sum()
    }
}

/// One (input, side information, target) triple.
///
/// Raw matrices are absent for datasets ingested in pre-cropped form; the
/// angular-delay forms are absent until [`CsiSample::preprocess`] runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsiSample {
    pub x_raw: Option<ComplexMatrix>,
    pub y_raw: Option<ComplexMatrix>,
    pub z_raw: Option<ComplexMatrix>,
    pub x_ad: Option<AngularDelayBlock>,
    pub y_ad: Option<AngularDelayBlock>,
    pub z_ad: Option<AngularDelayBlock>,
}

impl CsiSample {
    /// Fills the angular-delay forms from the raw matrices.
    pub fn preprocess(&mut self) -> Result<()> {
        let conv = |m: &Option<ComplexMatrix>| m.as_ref().map(transform::to_angular_delay).transpose();
        self.x_ad = conv(&self.x_raw)?;
        self.y_ad = conv(&self.y_raw)?;
        self.z_ad = conv(&self.z_raw)?;
        Ok(())
    }

    pub fn x(&self) -> Result<&AngularDelayBlock> {
        self.x_ad.as_ref().ok_or_else(|| Error::Shape("sample has no angular-delay input".into()))
    }

    pub fn z(&self) -> Result<&AngularDelayBlock> {
        self.z_ad.as_ref().ok_or_else(|| Error::Shape("sample has no angular-delay target".into()))
    }

    pub fn y(&self) -> Option<&AngularDelayBlock> {
        self.y_ad.as_ref()
    }
}

struct Ray {
    bs_angle: f64,
    ue_angle: f64,
    delay: f64,
    gain: Complex64,
}

fn draw_paths(config: &ChannelConfig, rng: &mut impl Rng) -> Vec<Ray> {
    let delay_dist = Exp::new(1.0 / config.delay_spread).expect("positive delay spread");
    let tap = config.tap_duration();
    let max_tap = (AD_SIZE - 1) as f64;
    let mut paths: Vec<Ray> = (0..config.n_paths)
        .map(|_| {
            let bs_angle = rng.random_range(-PI / 2.0..PI / 2.0);
            let ue_angle = rng.random_range(-PI..PI);
            let raw_delay: f64 = delay_dist.sample(rng);
            // Delays sit on the tap grid so the cropped delay window is lossless.
            let delay = (raw_delay / tap).round().min(max_tap) * tap;
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let power = (-raw_delay / config.delay_spread).exp();
            let gain = Complex64::new(re, im) * (power / 2.0).sqrt();
            Ray { bs_angle, ue_angle, delay, gain }
        })
        .collect();
    let total: f64 = paths.iter().map(|p| p.gain.norm_sqr()).sum();
    let norm = if total > 0.0 { total.sqrt().recip() } else { 0.0 };
    for p in &mut paths {
        p.gain *= norm;
    }
    paths
}

fn synthesize(config: &ChannelConfig, paths: &[Ray], carrier: f64, slot: usize) -> ComplexMatrix {
    let (rows, cols) = (config.n_bs_antennas, config.n_subcarriers);
    let elapsed = slot as f64 * config.slot_interval;
    let doppler_max = config.ue_speed * carrier / SPEED_OF_LIGHT;
    // Half-wavelength spacing at the DL carrier.
    let spacing = carrier / config.dl_carrier;
    let mut acc = vec![Complex64::new(0.0, 0.0); rows * cols];
    let mut freq = vec![Complex64::new(0.0, 0.0); cols];
    for p in paths {
        let rotation = Complex64::from_polar(1.0, 2.0 * PI * doppler_max * p.ue_angle.cos() * elapsed);
        let g = p.gain * rotation;
        for (k, f) in freq.iter_mut().enumerate() {
            *f = Complex64::from_polar(1.0, -2.0 * PI * p.delay * k as f64 * config.subcarrier_spacing);
        }
        let phase_step = -PI * spacing * p.bs_angle.sin();
        for a in 0..rows {
            let coef = g * Complex64::from_polar(1.0, phase_step * a as f64);
            let row = &mut acc[a * cols..(a + 1) * cols];
            for (h, f) in row.iter_mut().zip(&freq) {
                *h += coef * f;
            }
        }
    }
    ComplexMatrix {
        rows,
        cols,
        data: acc.into_iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect(),
    }
}

/// Generates one raw sample: X from the first snapshot on the DL carrier,
/// Y and Z from the last snapshot on the UL and DL carriers.
pub fn generate_sample(config: &ChannelConfig, sample_seed: u64) -> Result<CsiSample> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, Domain::Sample, sample_seed);
    let paths = draw_paths(config, &mut rng);
    let last = config.n_slots - 1;
    Ok(CsiSample {
        x_raw: Some(synthesize(config, &paths, config.dl_carrier, 0)),
        y_raw: Some(synthesize(config, &paths, config.ul_carrier, last)),
        z_raw: Some(synthesize(config, &paths, config.dl_carrier, last)),
        ..Default::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Offset added to sample seeds so the two splits never share a seed.
    fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 63,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Source {
    Synthetic { config: ChannelConfig, first_seed: u64 },
    Ingested { descriptor: LayoutDescriptor },
    /// Reconstructions written by a decoder; `checkpoint` names the model.
    Decoded { checkpoint: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<CsiSample>,
    pub split: Split,
    pub source: Source,
}

impl Dataset {
    /// Generates and preprocesses `count` samples of the given split.
    pub fn generate(config: &ChannelConfig, split: Split, count: usize) -> Result<Self> {
        config.validate()?;
        let first_seed = split.seed_offset();
        let samples = (0..count as u64)
            .map(|i| {
                let mut s = generate_sample(config, first_seed + i)?;
                s.preprocess()?;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, split, source: Source::Synthetic { config: config.clone(), first_seed } })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_side_info(&self) -> bool {
        self.samples.first().is_some_and(|s| s.y_raw.is_some() || s.y_ad.is_some())
    }

    /// Drops the raw matrices, keeping only the angular-delay forms.
    pub fn without_raw(mut self) -> Self {
        for s in &mut self.samples {
            s.x_raw = None;
            s.y_raw = None;
            s.z_raw = None;
        }
        self
    }

    /// Returns the first `n` samples as a new dataset.
    pub fn head(&self, n: usize) -> Self {
        Self { samples: self.samples.iter().take(n).cloned().collect(), ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Self {
        Self { samples: Vec::new(), split: self.split, source: self.source.clone() }
    }
}

// ---------------------------------------------------------------------------
// Binary format

const DATASET_MAGIC: &[u8; 4] = b"CSID";
const DATASET_VERSION: u16 = 1;
const FLAG_SIDE_INFO: u16 = 1 << 0;
const FLAG_RAW: u16 = 1 << 1;
const FLAG_AD: u16 = 1 << 2;

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    split: Split,
    source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FieldKind {
    Raw,
    AngularDelay,
}

struct Layout {
    raw_shape: (usize, usize),
    fields: Vec<(FieldKind, usize)>, // (kind, role 0=x 1=y 2=z)
}

impl Layout {
    fn roles(flags: u16) -> Vec<usize> {
        if flags & FLAG_SIDE_INFO != 0 {
            vec![0, 1, 2]
        } else {
            vec![0, 2]
        }
    }

    fn new(flags: u16, raw_shape: (usize, usize)) -> Self {
        let mut fields = Vec::new();
        if flags & FLAG_RAW != 0 {
            fields.extend(Self::roles(flags).into_iter().map(|r| (FieldKind::Raw, r)));
        }
        if flags & FLAG_AD != 0 {
            fields.extend(Self::roles(flags).into_iter().map(|r| (FieldKind::AngularDelay, r)));
        }
        Self { raw_shape, fields }
    }

    fn dims(&self, kind: FieldKind) -> [usize; 3] {
        match kind {
            FieldKind::Raw => [self.raw_shape.0, self.raw_shape.1, 2],
            FieldKind::AngularDelay => [AD_SIZE, AD_SIZE, 2],
        }
    }

    fn floats_per_sample(&self) -> usize {
        self.fields.iter().map(|(k, _)| self.dims(*k).iter().product::<usize>()).sum()
    }
}

fn sample_field<'a>(s: &'a CsiSample, kind: FieldKind, role: usize) -> FieldRef<'a> {
    match (kind, role) {
        (FieldKind::Raw, 0) => FieldRef::Raw(s.x_raw.as_ref()),
        (FieldKind::Raw, 1) => FieldRef::Raw(s.y_raw.as_ref()),
        (FieldKind::Raw, _) => FieldRef::Raw(s.z_raw.as_ref()),
        (FieldKind::AngularDelay, 0) => FieldRef::Ad(s.x_ad.as_ref()),
        (FieldKind::AngularDelay, 1) => FieldRef::Ad(s.y_ad.as_ref()),
        (FieldKind::AngularDelay, _) => FieldRef::Ad(s.z_ad.as_ref()),
    }
}

enum FieldRef<'a> {
    Raw(Option<&'a ComplexMatrix>),
    Ad(Option<&'a AngularDelayBlock>),
}

/// Writes a dataset in the `CSID` binary layout.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let first = dataset.samples.first();
    let mut flags = 0u16;
    let mut raw_shape = (0, 0);
    if let Some(s) = first {
        if s.y_raw.is_some() || s.y_ad.is_some() {
            flags |= FLAG_SIDE_INFO;
        }
        if let Some(x) = &s.x_raw {
            flags |= FLAG_RAW;
            raw_shape = (x.rows, x.cols);
        }
        if s.x_ad.is_some() {
            flags |= FLAG_AD;
        }
    }
    let layout = Layout::new(flags, raw_shape);

    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&flags.to_le_bytes())?;
    out.write_all(&(dataset.samples.len() as u64).to_le_bytes())?;
    for (kind, _) in &layout.fields {
        let dims = layout.dims(*kind);
        out.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    let meta = serde_json::to_vec(&DatasetMeta { split: dataset.split, source: dataset.source.clone() })?;
    out.write_all(&(meta.len() as u32).to_le_bytes())?;
    out.write_all(&meta)?;

    for (i, s) in dataset.samples.iter().enumerate() {
        for (kind, role) in &layout.fields {
            match sample_field(s, *kind, *role) {
                FieldRef::Raw(Some(m)) if (m.rows, m.cols) == raw_shape => {
                    for v in &m.data {
                        out.write_all(&v.re.to_le_bytes())?;
                        out.write_all(&v.im.to_le_bytes())?;
                    }
                }
                FieldRef::Ad(Some(b)) => {
                    if b.scale != 1.0 {
                        return Err(Error::Config(format!("sample {i}: datasets store unnormalized blocks")));
                    }
                    for v in &b.data {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
                _ => {
                    return Err(Error::Shape(format!("sample {i} does not match the layout of sample 0")));
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn header_err(what: &str) -> Error {
    Error::MalformedHeader(format!("header truncated while reading {what}"))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(4).ok_or_else(|| header_err("magic"))?;
    if magic != DATASET_MAGIC {
        return Err(Error::MalformedHeader(format!("bad magic {magic:?}, expected \"CSID\"")));
    }
    let version = cur.u16().ok_or_else(|| header_err("version"))?;
    if version != DATASET_VERSION {
        return Err(Error::Version { found: version, expected: DATASET_VERSION });
    }
    let flags = cur.u16().ok_or_else(|| header_err("flags"))?;
    if flags & !(FLAG_SIDE_INFO | FLAG_RAW | FLAG_AD) != 0 {
        return Err(Error::MalformedHeader(format!("unknown flag bits {flags:#06x}")));
    }
    let n_samples = cur.u64().ok_or_else(|| header_err("sample count"))?;

    let mut layout = Layout::new(flags, (0, 0));
    let mut raw_shape = None;
    for (kind, _) in layout.fields.clone() {
        let ndim = cur.u32().ok_or_else(|| header_err("shape header"))? as usize;
        if ndim != 3 {
            return Err(Error::Shape(format!("field has {ndim} dims, expected 3")));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize).ok_or_else(|| header_err("shape header")))
            .collect::<Result<_>>()?;
        match kind {
            FieldKind::Raw => {
                let shape = (dims[0], dims[1]);
                if dims[2] != 2 || raw_shape.is_some_and(|s| s != shape) {
                    return Err(Error::Shape(format!("inconsistent raw field shape {dims:?}")));
                }
                raw_shape = Some(shape);
            }
            FieldKind::AngularDelay => {
                if dims != [AD_SIZE, AD_SIZE, 2] {
                    return Err(Error::Shape(format!("angular-delay field shape {dims:?}, expected [32, 32, 2]")));
                }
            }
        }
    }
    layout.raw_shape = raw_shape.unwrap_or((0, 0));
    let meta_len = cur.u32().ok_or_else(|| header_err("metadata length"))? as usize;
    let meta_bytes = cur.take(meta_len).ok_or_else(|| header_err("metadata"))?;
    let meta: DatasetMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::MalformedHeader(format!("metadata: {e}")))?;

    let sample_bytes = (layout.floats_per_sample() * 4) as u64;
    let payload = (buf.len() - cur.pos) as u64;
    let expected = n_samples.saturating_mul(sample_bytes);
    if payload < expected {
        let sample = if sample_bytes == 0 { 0 } else { payload / sample_bytes };
        return Err(Error::Truncated { sample });
    }
    if payload > expected {
        return Err(Error::SizeMismatch { expected: cur.pos as u64 + expected, actual: buf.len() as u64 });
    }

    let mut floats = buf[cur.pos..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let mut samples = Vec::with_capacity(n_samples as usize);
    for _ in 0..n_samples {
        let mut s = CsiSample::default();
        for (kind, role) in &layout.fields {
            let dims = layout.dims(*kind);
            match kind {
                FieldKind::Raw => {
                    let n = dims[0] * dims[1];
                    let data = (0..n)
                        .map(|_| {
                            let re = floats.next().unwrap();
                            let im = floats.next().unwrap();
                            Complex32::new(re, im)
                        })
                        .collect();
                    let m = ComplexMatrix { rows: dims[0], cols: dims[1], data };
                    *[&mut s.x_raw, &mut s.y_raw, &mut s.z_raw][*role] = Some(m);
                }
                FieldKind::AngularDelay => {
                    let data: Vec<f32> = floats.by_ref().take(AngularDelayBlock::LEN).collect();
                    let b = AngularDelayBlock::new(data)?;
                    *[&mut s.x_ad, &mut s.y_ad, &mut s.z_ad][*role] = Some(b);
                }
            }
        }
        samples.push(s);
    }
    Ok(Dataset { samples, split: meta.split, source: meta.source })
}

// ---------------------------------------------------------------------------
// External ingestion

/// What a record of an external file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// Pre-cropped 32x32 angular-delay blocks.
    AngularDelay,
    /// Spatial-frequency matrices that still need the transform.
    Raw,
}

/// Arrangement of real and imaginary parts inside one field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementOrder {
    /// `[rows][cols][re, im]`.
    Interleaved,
    /// `[re|im][rows][cols]`: a real plane followed by an imaginary plane.
    Planar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldRole {
    X,
    Y,
    Z,
}

/// Declares how an externally produced little-endian binary file is laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    pub kind: RecordKind,
    pub rows: usize,
    pub cols: usize,
    pub order: ElementOrder,
    pub precision: Precision,
    /// Fields stored per record, in file order. A missing Z is taken to be X
    /// (reconstruction task).
    #[serde(default = "default_roles")]
    pub fields: Vec<FieldRole>,
    /// Declared record count; inferred from the file size when absent.
    #[serde(default)]
    pub n_samples: Option<u64>,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_roles() -> Vec<FieldRole> {
    vec![FieldRole::X]
}

fn default_split() -> Split {
    Split::Train
}

impl LayoutDescriptor {
    fn validate(&self) -> Result<()> {
        if self.rows != AD_SIZE {
            return Err(Error::Shape(format!("descriptor declares {} rows, expected {AD_SIZE}", self.rows)));
        }
        match self.kind {
            RecordKind::AngularDelay if self.cols != AD_SIZE => {
                return Err(Error::Shape(format!("pre-cropped records must be 32x32, got 32x{}", self.cols)));
            }
            RecordKind::Raw if self.cols < AD_SIZE => {
                return Err(Error::Shape(format!("raw records need at least 32 columns, got {}", self.cols)));
            }
            _ => {}
        }
        if !self.fields.contains(&FieldRole::X) {
            return Err(Error::Config("descriptor must declare an X field".into()));
        }
        let mut seen = self.fields.clone();
        seen.sort_by_key(|r| *r as u8);
        seen.dedup();
        if seen.len() != self.fields.len() {
            return Err(Error::Config("descriptor declares a field twice".into()));
        }
        Ok(())
    }

    fn record_bytes(&self) -> usize {
        self.fields.len() * self.rows * self.cols * 2 * self.precision.bytes()
    }
}

/// Reads an externally produced binary file according to `descriptor`.
pub fn ingest_external(path: impl AsRef<Path>, descriptor: &LayoutDescriptor) -> Result<Dataset> {
    descriptor.validate()?;
    let buf = fs::read(path)?;
    if buf.is_empty() {
        return Err(Error::Empty("external dataset file is empty".into()));
    }
    let record = descriptor.record_bytes() as u64;
    let actual = buf.len() as u64;
    let n = match descriptor.n_samples {
        Some(n) => {
            if n * record != actual {
                return Err(Error::SizeMismatch { expected: n * record, actual });
            }
            n
        }
        None => {
            if actual % record != 0 {
                return Err(Error::SizeMismatch { expected: actual.div_ceil(record) * record, actual });
            }
            actual / record
        }
    };

    let values: Vec<f64> = match descriptor.precision {
        Precision::F32 => buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
        Precision::F64 => buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
    };
    let (rows, cols) = (descriptor.rows, descriptor.cols);
    let field_len = rows * cols * 2;
    let decode_field = |chunk: &[f64]| -> Vec<Complex32> {
        (0..rows * cols)
            .map(|i| {
                let (re, im) = match descriptor.order {
                    ElementOrder::Interleaved => (chunk[2 * i], chunk[2 * i + 1]),
                    ElementOrder::Planar => (chunk[i], chunk[rows * cols + i]),
                };
                Complex32::new(re as f32, im as f32)
            })
            .collect()
    };

    let mut samples = Vec::with_capacity(n as usize);
    for rec in values.chunks_exact(field_len * descriptor.fields.len()) {
        let mut s = CsiSample::default();
        for (role, chunk) in descriptor.fields.iter().zip(rec.chunks_exact(field_len)) {
            let m = ComplexMatrix { rows, cols, data: decode_field(chunk) };
            let (raw, ad) = match descriptor.kind {
                RecordKind::Raw => {
                    let ad = transform::to_angular_delay(&m)?;
                    (Some(m), ad)
                }
                RecordKind::AngularDelay => (None, AngularDelayBlock::from_complex(&m.data)?),
            };
            match role {
                FieldRole::X => (s.x_raw, s.x_ad) = (raw, Some(ad)),
                FieldRole::Y => (s.y_raw, s.y_ad) = (raw, Some(ad)),
                FieldRole::Z => (s.z_raw, s.z_ad) = (raw, Some(ad)),
            }
        }
        if !descriptor.fields.contains(&FieldRole::Z) {
            s.z_raw = s.x_raw.clone();
            s.z_ad = s.x_ad.clone();
        }
        samples.push(s);
    }
    Ok(Dataset { samples, split: descriptor.split, source: Source::Ingested { descriptor: descriptor.clone() } })
}
