//! NMSE evaluation through serialized codewords, rate-distortion points and
//! SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineCodec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::DiffusionCodec;
use crate::transform::{nmse_blocks, nmse_db, AngularDelayBlock};
use crate::vq::{Codeword, Container, ContainerKind};

/// Samples decoded per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Diffusion,
    Baseline,
}

impl std::fmt::Display for CodecKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CodecKind::Diffusion => "diffusion",
            CodecKind::Baseline => "baseline",
        })
    }
}

/// A codec seen as bytes in, blocks out.
pub trait Codec {
    fn kind(&self) -> CodecKind;
    fn rate_bits(&self) -> usize;
    fn uses_side_info(&self) -> bool;
    /// Serialized codeword containers, one per block.
    fn encode_containers(&self, blocks: &[&AngularDelayBlock]) -> Result<Vec<Vec<u8>>>;
    fn decode_containers(&self, containers: &[Vec<u8>], side: Option<&[&AngularDelayBlock]>) -> Result<Vec<AngularDelayBlock>>;
}

impl Codec for DiffusionCodec {
    fn kind(&self) -> CodecKind {
        CodecKind::Diffusion
    }

    fn rate_bits(&self) -> usize {
        DiffusionCodec::rate_bits(self)
    }

    fn uses_side_info(&self) -> bool {
        DiffusionCodec::uses_side_info(self)
    }

    fn encode_containers(&self, blocks: &[&AngularDelayBlock]) -> Result<Vec<Vec<u8>>> {
        let n_v = self.spec().n_vectors as u16;
        Ok(self
            .encode_batch(blocks)?
            .iter()
            .map(|cw| Container { kind: ContainerKind::Codebook, param: n_v, bits: cw.to_bits() }.to_bytes())
            .collect())
    }

    fn decode_containers(&self, containers: &[Vec<u8>], side: Option<&[&AngularDelayBlock]>) -> Result<Vec<AngularDelayBlock>> {
        let codewords = containers
            .iter()
            .map(|bytes| {
                let c = Container::from_bytes(bytes)?;
                if c.kind != ContainerKind::Codebook {
                    return Err(Error::ArchMismatch("container holds a baseline codeword".into()));
                }
                if c.param as usize != self.spec().n_vectors {
                    return Err(Error::ArchMismatch(format!(
                        "codeword uses a {}-entry codebook, model has {}",
                        c.param,
                        self.spec().n_vectors
                    )));
                }
                Codeword::from_bits(&c.bits, c.param as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        self.decode_batch(&codewords, side)
    }
}

impl Codec for BaselineCodec {
    fn kind(&self) -> CodecKind {
        CodecKind::Baseline
    }

    fn rate_bits(&self) -> usize {
        BaselineCodec::rate_bits(self)
    }

    fn uses_side_info(&self) -> bool {
        BaselineCodec::uses_side_info(self)
    }

    fn encode_containers(&self, blocks: &[&AngularDelayBlock]) -> Result<Vec<Vec<u8>>> {
        Ok(self.encode_batch(blocks)?.into_iter().map(|b| self.container(b).to_bytes()).collect())
    }

    fn decode_containers(&self, containers: &[Vec<u8>], side: Option<&[&AngularDelayBlock]>) -> Result<Vec<AngularDelayBlock>> {
        let codes =
            containers.iter().map(|bytes| self.open(Container::from_bytes(bytes)?)).collect::<Result<Vec<_>>>()?;
        self.decode_batch(&codes, side)
    }
}

/// One row of a rate-distortion table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub codec: CodecKind,
    pub rate_bits: usize,
    pub nmse_db: f64,
    pub side_info: bool,
    pub train_steps: u64,
    pub seed: u64,
    pub dataset: String,
}

/// Reconstructions of every sample's target, obtained by encoding X,
/// serializing, parsing and decoding with Y when the codec uses it.
pub fn reconstruct(codec: &dyn Codec, dataset: &Dataset) -> Result<Vec<AngularDelayBlock>> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation split has no samples".into()));
    }
    if codec.uses_side_info() && !dataset.has_side_info() {
        return Err(Error::Shape("codec needs side information but the dataset has none".into()));
    }
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(EVAL_CHUNK) {
        let xs = chunk.iter().map(|s| s.x()).collect::<Result<Vec<_>>>()?;
        let bytes = codec.encode_containers(&xs)?;
        let side = if codec.uses_side_info() {
            Some(chunk.iter().map(|s| s.y().ok_or_else(|| Error::Shape("sample lacks Y".into()))).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        out.extend(codec.decode_containers(&bytes, side.as_deref())?);
    }
    Ok(out)
}

/// Linear NMSE of reconstructions against the dataset's targets.
pub fn nmse_against(dataset: &Dataset, z_hat: &[AngularDelayBlock]) -> Result<f64> {
    let z = dataset.samples.iter().map(|s| s.z().cloned()).collect::<Result<Vec<_>>>()?;
    nmse_blocks(&z, z_hat)
}

/// Full encode, serialize, parse and decode round trip with NMSE in dB.
/// Training metadata fields of the returned point are left at zero.
pub fn evaluate(codec: &dyn Codec, dataset: &Dataset) -> Result<RdPoint> {
    let z_hat = reconstruct(codec, dataset)?;
    let linear = nmse_against(dataset, &z_hat)?;
    Ok(RdPoint {
        codec: codec.kind(),
        rate_bits: codec.rate_bits(),
        nmse_db: nmse_db(linear),
        side_info: codec.uses_side_info(),
        train_steps: 0,
        seed: 0,
        dataset: String::new(),
    })
}

pub fn write_rd_csv(points: &[RdPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rd_csv(path: impl AsRef<Path>) -> Result<Vec<RdPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// True when NMSE (dB) does not increase with rate within each
/// (codec, side info) series.
pub fn is_monotone(points: &[RdPoint]) -> bool {
    series(points).iter().all(|(_, s)| s.windows(2).all(|w| w[1].nmse_db <= w[0].nmse_db))
}

fn series(points: &[RdPoint]) -> Vec<((CodecKind, bool), Vec<&RdPoint>)> {
    let mut out: Vec<((CodecKind, bool), Vec<&RdPoint>)> = Vec::new();
    for p in points {
        let key = (p.codec, p.side_info);
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, s)) => s.push(p),
            None => out.push((key, vec![p])),
        }
    }
    for (_, s) in &mut out {
        s.sort_by_key(|p| p.rate_bits);
    }
    out
}

/// Rate (linear axis) versus NMSE in dB as a standalone SVG document, one
/// polyline per (codec, side info) series. Series whose NMSE rises with rate
/// are marked in the legend.
pub fn rd_plot_svg(points: &[RdPoint]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 180.0;
    const T: f64 = 30.0;
    const B: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

    let finite: Vec<&RdPoint> = points.iter().filter(|p| p.nmse_db.is_finite()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &finite {
        x0 = x0.min(p.rate_bits as f64);
        x1 = x1.max(p.rate_bits as f64);
        y0 = y0.min(p.nmse_db);
        y1 = y1.max(p.nmse_db);
    }
    if finite.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, -1.0, 0.0);
    }
    if x1 - x0 < 1.0 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    y0 = (y0 - 1.0).floor();
    y1 = (y1 + 1.0).ceil();
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let sy = |y: f64| T + (y1 - y) / (y1 - y0) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{L},{T} V{} H{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R
    );
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.0}</text>"#, sx(x), H - B + 18.0);
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.1}</text>"#, L - 6.0, sy(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">rate (bits)</text>"#, (L + W - R) / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">NMSE (dB)</text>"#,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0
    );
    for (i, ((codec, side), pts)) in series(&finite.into_iter().cloned().collect::<Vec<_>>()).iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p.rate_bits as f64), sy(p.nmse_db))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, coords.join(" "));
        for p in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(p.rate_bits as f64), sy(p.nmse_db));
        }
        let monotone = pts.windows(2).all(|w| w[1].nmse_db <= w[0].nmse_db);
        let label = format!("{codec}{}{}", if *side { " + UL" } else { "" }, if monotone { "" } else { " (non-monotone)" });
        let ly = T + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - R + 10.0, W - R + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{label}</text>"#, W - R + 36.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}
