use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use csi_codec::data::{read_dataset, write_dataset, Source};
use csi_codec::eval::{self, CodecKind, RdPoint};
use csi_codec::training::{self, Checkpoint, LoadedCodec, TrainState};
use csi_codec::transform::{from_angular_delay, nmse_db};
use csi_codec::{AngularDelayBlock, BaselineConfig, CsiSample, Dataset, Split, TrainingConfig};

use crate::config::{self, ConfigError, ExperimentConfig};
use crate::CodecArg;

/// File name of the `i`-th codeword written by `encode`.
pub fn codeword_name(i: usize) -> String {
    format!("cw_{i:06}.bin")
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn dataset_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn gen_data(
    config: Option<&Path>,
    sets: &[String],
    out: &Path,
    split: &str,
    count: usize,
    seed: Option<u64>,
    angular_only: bool,
) -> Result<()> {
    let mut channel = config::channel_config(config::load_table(config, sets)?)?;
    if let Some(s) = seed {
        channel.seed = s;
    }
    let split: Split = split.parse()?;
    if count == 0 {
        return Err(ConfigError("count must be at least 1".into()).into());
    }
    let mut ds = Dataset::generate(&channel, split, count)?;
    if angular_only {
        ds = ds.without_raw();
    }
    write_dataset(&ds, out).with_context(|| format!("writing {}", out.display()))?;
    info!("wrote {count} {split:?} samples (seed {}) to {}", channel.seed, out.display());
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    sets: &[String],
    data: &Path,
    out: &Path,
    val: Option<&Path>,
    codec: CodecArg,
    resume: Option<&Path>,
) -> Result<()> {
    let (training, baseline) = config::training_file(config::load_table(config, sets)?)?;
    let ds = load_data(data)?;
    let val = val.map(load_data).transpose()?;
    let log = match codec {
        CodecArg::Diffusion => {
            let mut state = match resume {
                Some(p) => {
                    let mut s = TrainState::load(p, None).with_context(|| format!("loading {}", p.display()))?;
                    s.config.n_train = training.n_train;
                    s
                }
                None => TrainState::new(&training, &ds)?,
            };
            info!("training diffusion codec: {} bits, seed {}", state.codec.rate_bits(), state.config.seed);
            training::train_from(&mut state, &ds, val.as_ref(), Some(out))?
        }
        CodecArg::Baseline => {
            if resume.is_some() {
                return Err(ConfigError("--resume supports only the diffusion codec".into()).into());
            }
            info!("training baseline codec: {} bits, seed {}", baseline.rate_bits(), training.seed);
            training::train_baseline(&training, &baseline, &ds, val.as_ref(), Some(out))?.1
        }
    };
    if let Some(last) = log.last() {
        info!("step {}: loss {:.6}", last.step, last.loss);
    }
    info!("checkpoint and metrics written to {}", out.display());
    Ok(())
}

pub fn encode(ckpt: &Path, data: &Path, out: &Path, limit: Option<usize>) -> Result<()> {
    let loaded = training::load_codec(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let codec = loaded.as_codec();
    let mut ds = load_data(data)?;
    if let Some(n) = limit {
        ds = ds.head(n);
    }
    fs::create_dir_all(out)?;
    let mut i = 0;
    for chunk in ds.samples.chunks(eval::EVAL_CHUNK) {
        let xs = chunk.iter().map(|s| s.x()).collect::<csi_codec::Result<Vec<_>>>()?;
        for bytes in codec.encode_containers(&xs)? {
            fs::write(out.join(codeword_name(i)), bytes)?;
            i += 1;
        }
    }
    info!("wrote {i} codewords of {} bits to {}", codec.rate_bits(), out.display());
    Ok(())
}

fn codeword_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "bin"));
    files.sort();
    if files.is_empty() {
        bail!(csi_codec::Error::Empty(format!("no codeword files in {}", dir.display())));
    }
    Ok(files)
}

pub fn decode(
    ckpt: &Path,
    codewords: &Path,
    out: &Path,
    side: Option<&Path>,
    full_subcarriers: Option<usize>,
) -> Result<()> {
    let loaded = training::load_codec(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let codec = loaded.as_codec();
    let files = codeword_files(codewords)?;
    let side_ds = match (codec.uses_side_info(), side) {
        (true, Some(p)) => Some(load_data(p)?),
        (true, None) => bail!(csi_codec::Error::Shape("model uses side information; pass --side".into())),
        (false, _) => None,
    };
    if let Some(ds) = &side_ds {
        if ds.len() < files.len() {
            bail!(csi_codec::Error::Shape(format!("{} codewords but only {} side-information samples", files.len(), ds.len())));
        }
    }
    let mut blocks: Vec<AngularDelayBlock> = Vec::with_capacity(files.len());
    for (k, chunk) in files.chunks(eval::EVAL_CHUNK).enumerate() {
        let bytes = chunk.iter().map(fs::read).collect::<std::io::Result<Vec<_>>>()?;
        let ys = match &side_ds {
            Some(ds) => Some(
                ds.samples[k * eval::EVAL_CHUNK..k * eval::EVAL_CHUNK + chunk.len()]
                    .iter()
                    .map(|s| s.y().ok_or_else(|| csi_codec::Error::Shape("side dataset lacks Y".into())))
                    .collect::<csi_codec::Result<Vec<_>>>()?,
            ),
            None => None,
        };
        blocks.extend(codec.decode_containers(&bytes, ys.as_deref())?);
    }
    let samples = blocks
        .into_iter()
        .map(|b| {
            // Reconstructions fill both the input and target roles.
            let raw = full_subcarriers.map(|n| from_angular_delay(&b, n)).transpose()?;
            Ok(CsiSample { x_raw: raw.clone(), z_raw: raw, x_ad: Some(b.clone()), z_ad: Some(b), ..Default::default() })
        })
        .collect::<csi_codec::Result<Vec<_>>>()?;
    let n = samples.len();
    let ds = Dataset { samples, split: Split::Test, source: Source::Decoded { checkpoint: ckpt.display().to_string() } };
    write_dataset(&ds, out)?;
    info!("decoded {n} codewords to {}", out.display());
    Ok(())
}

/// Metadata recorded with a checkpoint: training steps and seed.
fn checkpoint_meta(ckpt: &Path) -> Result<(u64, u64)> {
    let header = Checkpoint::read(ckpt)?.header;
    Ok((header.step, header.training.map_or(0, |t| t.seed)))
}

pub fn eval(data: &Path, ckpt: Option<&Path>, recon: Option<&Path>, limit: Option<usize>, csv: Option<&Path>) -> Result<()> {
    let mut ds = load_data(data)?;
    if let Some(n) = limit {
        ds = ds.head(n);
    }
    if let Some(r) = recon {
        let rec = load_data(r)?;
        if rec.len() < ds.len() {
            bail!(csi_codec::Error::Shape(format!("{} reconstructions for {} samples", rec.len(), ds.len())));
        }
        let z_hat = rec.samples[..ds.len()].iter().map(|s| s.z().cloned()).collect::<csi_codec::Result<Vec<_>>>()?;
        let db = nmse_db(eval::nmse_against(&ds, &z_hat)?);
        println!("nmse_db = {db:.6}");
        return Ok(());
    }
    let ckpt = ckpt.expect("clap requires --ckpt without --recon");
    let loaded = training::load_codec(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut point = eval::evaluate(loaded.as_codec(), &ds)?;
    (point.train_steps, point.seed) = checkpoint_meta(ckpt)?;
    point.dataset = dataset_id(data);
    println!("codec = {}\nrate_bits = {}\nside_info = {}\nnmse_db = {:.6}", point.codec, point.rate_bits, point.side_info, point.nmse_db);
    if let Some(path) = csv {
        let mut points = if path.exists() { eval::read_rd_csv(path)? } else { Vec::new() };
        points.push(point);
        eval::write_rd_csv(&points, path)?;
    }
    Ok(())
}

fn sweep_data(exp: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match (&exp.train_data, &exp.test_data, &exp.synthetic) {
        (Some(tr), Some(te), _) => Ok((load_data(tr)?, load_data(te)?)),
        (_, _, Some(s)) => Ok((
            Dataset::generate(&s.channel, Split::Train, s.train_samples)?.without_raw(),
            Dataset::generate(&s.channel, Split::Test, s.test_samples)?.without_raw(),
        )),
        _ => unreachable!("validated by ExperimentConfig::from_table"),
    }
}

pub fn rd_sweep(config: &Path, sets: &[String], out: &Path) -> Result<()> {
    let table = config::load_table(Some(config), sets)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let (exp, training, baseline) = ExperimentConfig::from_table(table, base)?;
    let (train_ds, test_ds) = sweep_data(&exp)?;
    let test_ds = match exp.eval_samples {
        Some(n) => test_ds.head(n),
        None => test_ds,
    };
    fs::create_dir_all(out)?;
    let mut cells: Vec<(CodecKind, usize, bool)> = Vec::new();
    for &side in &exp.side_info {
        cells.extend(exp.diffusion_rates.iter().map(|&r| (CodecKind::Diffusion, r, side)));
        cells.extend(exp.baseline_rates.iter().map(|&r| (CodecKind::Baseline, r, side)));
    }
    let mut points = Vec::with_capacity(cells.len());
    for (kind, rate, side) in cells {
        let dir = out.join(format!("{kind}_{rate}_{}", if side { "side" } else { "plain" }));
        let cfg = TrainingConfig { use_side_info: side, ..training.clone() };
        let loaded = match kind {
            CodecKind::Diffusion => {
                let cfg = TrainingConfig { n_vectors: rate, ..cfg };
                info!("cell {kind} N_v={rate} side={side}");
                let (state, _) = training::train(&cfg, &train_ds, None, Some(&dir))?;
                LoadedCodec::Diffusion(state.codec)
            }
            CodecKind::Baseline => {
                let bc = BaselineConfig { n_clf: rate, use_side_info: side, ..baseline.clone() };
                info!("cell {kind} N_clf={rate} side={side}");
                LoadedCodec::Baseline(training::train_baseline(&cfg, &bc, &train_ds, None, Some(&dir))?.0)
            }
        };
        let mut p: RdPoint = eval::evaluate(loaded.as_codec(), &test_ds)?;
        p.train_steps = cfg.n_train;
        p.seed = cfg.seed;
        p.dataset = exp.name.clone();
        info!("{} bits: {:.3} dB", p.rate_bits, p.nmse_db);
        points.push(p);
    }
    eval::write_rd_csv(&points, out.join("rd.csv"))?;
    fs::write(out.join("rd.svg"), eval::rd_plot_svg(&points))?;
    if eval::is_monotone(&points) {
        info!("every series is non-increasing in NMSE as rate grows");
    } else {
        info!("at least one series is non-monotone; see the plot legend");
    }
    Ok(())
}
