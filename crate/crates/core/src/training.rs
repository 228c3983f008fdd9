//! The training loop: minibatching, the weighted denoising objective plus
//! codebook loss, Adam updates, metrics and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineCodec, BaselineConfig};
use crate::data::{CsiSample, Dataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{blocks_to_tensor, DiffusionCodec, DiffusionSpec};
use crate::nn::{ArchDescriptor, ParamStore};
use crate::rng::{self, Domain};
use crate::transform::Normalizer;
use crate::AD_SIZE;

/// Named architecture profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Desk,
}

impl Profile {
    pub fn arch(self, side_info: bool) -> ArchDescriptor {
        match self {
            Profile::Full => ArchDescriptor::full(side_info),
            Profile::Desk => ArchDescriptor::desk(side_info),
        }
    }
}

/// Flat training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Codebook-loss weight.
    pub eta: f64,
    pub n_train: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Diffusion steps T.
    pub steps: usize,
    pub n_vectors: usize,
    pub profile: Profile,
    pub use_side_info: bool,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    /// Steps between validation decodes; 0 disables them.
    pub val_every: u64,
    /// Size of the fixed validation subset.
    pub val_samples: usize,
    /// Steps between metric rows.
    pub log_every: u64,
    /// Excludes the codebook from optimizer updates.
    pub freeze_codebook: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            eta: 4.5e-4,
            n_train: 300_000,
            batch_size: 100,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            steps: 4,
            n_vectors: 8,
            profile: Profile::Full,
            use_side_info: false,
            seed: 0,
            checkpoint_every: 10_000,
            val_every: 1000,
            val_samples: 100,
            log_every: 100,
            freeze_codebook: false,
        }
    }
}

impl TrainingConfig {
    /// A configuration sized for CPU-only experiments.
    pub fn desk() -> Self {
        Self { profile: Profile::Desk, batch_size: 10, checkpoint_every: 0, val_every: 0, log_every: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(Error::Config("diffusion steps must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        crate::vq::rate_for(self.n_vectors)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    /// Number of updates applied so far.
    pub t: u64,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: &TrainingConfig) -> Result<Self> {
        let m = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            clip: config.grad_clip,
            t: 0,
            vars,
            m,
            v,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    /// Global L2 norm of the gradients of the optimized variables.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies one update. Variables without a gradient are left untouched.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g * scale)?;
            self.m[i] = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&self.m[i] / bc1)?;
            let v_hat = (&self.v[i] / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(norm)
    }

    fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.vars.iter().zip(self.m.iter().zip(&self.v)).map(|((n, _), (m, v))| (n.as_str(), m, v))
    }

    fn set_moments(&mut self, name: &str, m: Tensor, v: Tensor) -> Result<()> {
        let i = self
            .vars
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Corrupt(format!("optimizer state for unknown parameter {name}")))?;
        if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
            return Err(Error::ArchMismatch(format!("optimizer state shape mismatch for {name}")));
        }
        self.m[i] = m;
        self.v[i] = v;
        Ok(())
    }
}

fn optimized_vars(store: &ParamStore, exclude: Option<&str>) -> Vec<(String, Var)> {
    store.iter().filter(|(n, _)| Some(n.as_str()) != exclude).map(|(n, v)| (n.clone(), v.clone())).collect()
}

// ---------------------------------------------------------------------------
// Batching

/// Indices of the minibatch for `step`: epoch-wise shuffles derived from the
/// run seed, consumed as one continuous stream.
pub fn batch_indices(seed: u64, n: usize, batch_size: usize, step: u64) -> Vec<usize> {
    let start = step as usize * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut perm_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for pos in start..start + batch_size {
        let epoch = pos / n;
        if epoch != perm_epoch {
            perm = (0..n).collect();
            perm.shuffle(&mut rng::stream(seed, Domain::Shuffle, epoch as u64));
            perm_epoch = epoch;
        }
        out.push(perm[pos % n]);
    }
    out
}

/// Normalized tensors of one minibatch.
pub struct Batch {
    pub x: Tensor,
    pub y: Option<Tensor>,
    pub z: Tensor,
}

impl Batch {
    pub fn new(samples: &[&CsiSample], normalizer: &Normalizer, side_info: bool, dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let xs = samples.iter().map(|s| s.x()).collect::<Result<Vec<_>>>()?;
        let zs = samples.iter().map(|s| s.z()).collect::<Result<Vec<_>>>()?;
        let y = if side_info {
            let ys = samples
                .iter()
                .map(|s| s.y().ok_or_else(|| Error::Shape("sample lacks side information".into())))
                .collect::<Result<Vec<_>>>()?;
            Some(blocks_to_tensor(&ys, normalizer, dtype, &dev)?)
        } else {
            None
        };
        Ok(Self {
            x: blocks_to_tensor(&xs, normalizer, dtype, &dev)?,
            y,
            z: blocks_to_tensor(&zs, normalizer, dtype, &dev)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// State and steps

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub denoise: f64,
    pub codebook: f64,
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub denoise_loss: f64,
    pub cb_loss: f64,
    pub val_nmse_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub codec: DiffusionCodec,
    pub optimizer: Adam,
    /// Times each codebook entry was selected.
    pub usage: Vec<u64>,
    /// Exponential moving average of the total loss.
    pub loss_ema: Option<f64>,
    pub config: TrainingConfig,
}

impl TrainState {
    /// Fresh state with the normalizer fitted on `dataset`.
    pub fn new(config: &TrainingConfig, dataset: &Dataset) -> Result<Self> {
        Self::with_normalizer(config, Normalizer::fit_dataset(dataset))
    }

    pub fn with_normalizer(config: &TrainingConfig, normalizer: Normalizer) -> Result<Self> {
        Self::with_dtype(config, normalizer, DType::F32)
    }

    pub fn with_dtype(config: &TrainingConfig, normalizer: Normalizer, dtype: DType) -> Result<Self> {
        config.validate()?;
        let spec = DiffusionSpec {
            arch: config.profile.arch(config.use_side_info),
            n_vectors: config.n_vectors,
            steps: config.steps,
            normalizer,
        };
        let codec = DiffusionCodec::new(spec, config.seed, dtype)?;
        let exclude = config.freeze_codebook.then_some(crate::model::CODEBOOK_PARAM);
        let optimizer = Adam::new(optimized_vars(codec.params(), exclude), config)?;
        Ok(Self { step: 0, usage: vec![0; config.n_vectors], codec, optimizer, loss_ema: None, config: config.clone() })
    }

    /// The diffusion steps and noise drawn for `step`.
    pub fn step_randomness(&self, step: u64, batch: usize) -> Result<(Vec<usize>, Tensor)> {
        let mut r = rng::stream(self.config.seed, Domain::Step, step);
        let t_max = self.config.steps;
        let steps: Vec<usize> = (0..batch).map(|_| r.random_range(1..=t_max)).collect();
        let eps: Vec<f32> = (0..batch * 2 * AD_SIZE * AD_SIZE).map(|_| r.sample(StandardNormal)).collect();
        let eps = Tensor::from_vec(eps, (batch, 2, AD_SIZE, AD_SIZE), &Device::Cpu)?.to_dtype(self.codec.dtype())?;
        Ok((steps, eps))
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let (steps, eps) = self.step_randomness(self.step, batch.len())?;
        let parts = self.codec.loss(&batch.x, batch.y.as_ref(), &batch.z, &steps, &eps, self.config.eta)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let losses =
            LossBreakdown { total: scalar(&parts.total)?, denoise: scalar(&parts.denoise)?, codebook: scalar(&parts.codebook)? };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("denoise {} codebook {} steps {steps:?}", losses.denoise, losses.codebook),
            });
        }
        let grads = parts.total.backward()?;
        self.optimizer.step(&grads)?;
        for cw in &parts.codewords {
            for &i in &cw.indices {
                self.usage[i as usize] += 1;
            }
        }
        self.loss_ema = Some(match self.loss_ema {
            Some(prev) => 0.99 * prev + 0.01 * losses.total,
            None => losses.total,
        });
        self.step += 1;
        Ok(losses)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ck = Checkpoint::new(ModelSpec::Diffusion(self.codec.spec().clone()));
        ck.header.step = self.step;
        ck.header.usage = self.usage.clone();
        ck.header.loss_ema = self.loss_ema;
        ck.header.training = Some(self.config.clone());
        ck.header.adam_t = self.optimizer.t;
        ck.add_params(self.codec.params())?;
        for (name, m, v) in self.optimizer.moments() {
            ck.add_tensor(format!("adam.m:{name}"), m)?;
            ck.add_tensor(format!("adam.v:{name}"), v)?;
        }
        ck.write(path)
    }

    /// Restores a state written by [`TrainState::save`]. When `expected` is
    /// given, the stored architecture must equal it.
    pub fn load(path: impl AsRef<Path>, expected: Option<&ArchDescriptor>) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let ModelSpec::Diffusion(spec) = &ck.header.model else {
            return Err(Error::ArchMismatch("checkpoint holds a baseline model".into()));
        };
        if let Some(arch) = expected {
            if arch != &spec.arch {
                return Err(Error::ArchMismatch(format!("checkpoint architecture {:?} differs from {arch:?}", spec.arch)));
            }
        }
        let config = ck.header.training.clone().ok_or_else(|| Error::Corrupt("checkpoint has no training config".into()))?;
        if config.n_vectors != spec.n_vectors || config.steps != spec.steps || config.profile.arch(config.use_side_info) != spec.arch {
            return Err(Error::Corrupt("training config disagrees with the stored model".into()));
        }
        let mut state = Self::with_normalizer(&config, spec.normalizer)?;
        ck.restore_params(state.codec.params())?;
        for name in state.optimizer.names().map(str::to_owned).collect::<Vec<_>>() {
            let m = ck.tensor(&format!("adam.m:{name}"))?;
            let v = ck.tensor(&format!("adam.v:{name}"))?;
            state.optimizer.set_moments(&name, m, v)?;
        }
        state.optimizer.t = ck.header.adam_t;
        state.step = ck.header.step;
        state.loss_ema = ck.header.loss_ema;
        if ck.header.usage.len() != spec.n_vectors {
            return Err(Error::Corrupt("usage counters do not match the codebook".into()));
        }
        state.usage = ck.header.usage;
        Ok(state)
    }
}

/// Validation NMSE (dB) of the codec on up to `limit` samples, decoding
/// through the full backward process.
pub fn validation_nmse_db(codec: &DiffusionCodec, val: &Dataset, limit: usize) -> Result<f64> {
    let subset = val.head(limit);
    eval::evaluate(codec, &subset).map(|p| p.nmse_db)
}

/// Runs training from a fresh state.
pub fn train(
    config: &TrainingConfig,
    dataset: &Dataset,
    val: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<(TrainState, Vec<MetricsRow>)> {
    let mut state = TrainState::new(config, dataset)?;
    let log = train_from(&mut state, dataset, val, out_dir)?;
    Ok((state, log))
}

/// Continues training `state` until `state.config.n_train` steps have run.
pub fn train_from(
    state: &mut TrainState,
    dataset: &Dataset,
    val: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<Vec<MetricsRow>> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset has no samples".into()));
    }
    if state.config.use_side_info && !dataset.has_side_info() {
        return Err(Error::Shape("side-information training needs a dataset with Y".into()));
    }
    let config = state.config.clone();
    let normalizer = *state.codec.normalizer();
    let mut log = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    while state.step < config.n_train {
        let step = state.step;
        let idx = batch_indices(config.seed, dataset.len(), config.batch_size, step);
        let samples: Vec<&CsiSample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
        let batch = Batch::new(&samples, &normalizer, config.use_side_info, state.codec.dtype())?;
        let losses = state.train_step(&batch)?;
        let done = state.step;
        let val_nmse_db = match val {
            Some(v) if config.val_every > 0 && done % config.val_every == 0 => {
                Some(validation_nmse_db(&state.codec, v, config.val_samples)?)
            }
            _ => None,
        };
        if done % config.log_every == 0 || val_nmse_db.is_some() || done == config.n_train {
            log::debug!("step {done}: loss {:.5} (denoise {:.5}, cb {:.5})", losses.total, losses.denoise, losses.codebook);
            log.push(MetricsRow {
                step: done,
                loss: losses.total,
                denoise_loss: losses.denoise,
                cb_loss: losses.codebook,
                val_nmse_db,
            });
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                state.save(dir.join(format!("step_{done:08}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        state.save(dir.join("final.ckpt"))?;
        write_metrics(&log, dir.join("metrics.csv"))?;
    }
    Ok(log)
}

/// Trains the uniform-quantization baseline with the plain MSE objective and
/// the same batching, optimizer and logging contract as the diffusion codec.
/// `config.n_vectors`, `eta`, `steps` and `freeze_codebook` are ignored.
pub fn train_baseline(
    config: &TrainingConfig,
    baseline: &BaselineConfig,
    dataset: &Dataset,
    val: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<(BaselineCodec, Vec<MetricsRow>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset has no samples".into()));
    }
    let side_info = baseline.use_side_info;
    if side_info && !dataset.has_side_info() {
        return Err(Error::Shape("side-information training needs a dataset with Y".into()));
    }
    let normalizer = Normalizer::fit_dataset(dataset);
    let codec = BaselineCodec::new(baseline.clone(), normalizer, config.seed, DType::F32)?;
    let mut adam = Adam::new(optimized_vars(codec.params(), None), config)?;
    let mut log = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    for step in 0..config.n_train {
        let idx = batch_indices(config.seed, dataset.len(), config.batch_size, step);
        let samples: Vec<&CsiSample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
        let batch = Batch::new(&samples, &normalizer, side_info, codec.dtype())?;
        let loss = codec.loss(&batch.x, batch.y.as_ref(), &batch.z)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, detail: "baseline loss".into() });
        }
        adam.step(&loss.backward()?)?;
        let done = step + 1;
        let val_nmse_db = match val {
            Some(v) if config.val_every > 0 && done % config.val_every == 0 => {
                Some(eval::evaluate(&codec, &v.head(config.val_samples))?.nmse_db)
            }
            _ => None,
        };
        if done % config.log_every == 0 || val_nmse_db.is_some() || done == config.n_train {
            log.push(MetricsRow { step: done, loss: value, denoise_loss: value, cb_loss: 0.0, val_nmse_db });
        }
    }
    if let Some(dir) = out_dir {
        save_baseline(&codec, config, dir.join("final.ckpt"))?;
        write_metrics(&log, dir.join("metrics.csv"))?;
    }
    Ok((codec, log))
}

pub fn save_baseline(codec: &BaselineCodec, config: &TrainingConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut ck = Checkpoint::new(ModelSpec::Baseline(BaselineSpec {
        config: codec.config().clone(),
        normalizer: *codec.normalizer(),
    }));
    ck.header.step = config.n_train;
    ck.header.training = Some(config.clone());
    ck.add_params(codec.params())?;
    ck.write(path)
}

/// Writes the metrics log as CSV (`step,loss,denoise_loss,cb_loss,val_nmse_db`).
pub fn write_metrics(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

// ---------------------------------------------------------------------------
// Checkpoint container

const CHECKPOINT_MAGIC: &[u8; 4] = b"CSIK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// The model a checkpoint holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "codec", rename_all = "lowercase")]
pub enum ModelSpec {
    Diffusion(DiffusionSpec),
    Baseline(BaselineSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub config: BaselineConfig,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    pub step: u64,
    pub adam_t: u64,
    pub usage: Vec<u64>,
    pub loss_ema: Option<f64>,
    pub training: Option<TrainingConfig>,
    tensors: Vec<TensorEntry>,
}

/// `CSIK | version u16 | header_len u32 | JSON header | f32 tensors`, the
/// tensors little-endian in header order.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn new(model: ModelSpec) -> Self {
        Self {
            header: CheckpointHeader { model, step: 0, adam_t: 0, usage: Vec::new(), loss_ema: None, training: None, tensors: Vec::new() },
            data: Vec::new(),
        }
    }

    pub fn add_tensor(&mut self, name: String, t: &Tensor) -> Result<()> {
        let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        self.header.tensors.push(TensorEntry { name, shape: t.dims().to_vec() });
        self.data.push(values);
        Ok(())
    }

    pub fn add_params(&mut self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.iter() {
            self.add_tensor(format!("param:{name}"), var.as_tensor())?;
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let i = self
            .header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks tensor {name}")))?;
        Ok(Tensor::from_slice(&self.data[i], self.header.tensors[i].shape.as_slice(), &Device::Cpu)?)
    }

    /// Copies stored values into every parameter of `store`.
    pub fn restore_params(&self, store: &ParamStore) -> Result<()> {
        let stored = self.header.tensors.iter().filter(|e| e.name.starts_with("param:")).count();
        if stored != store.len() {
            return Err(Error::ArchMismatch(format!("checkpoint has {stored} parameters, model has {}", store.len())));
        }
        for (i, e) in self.header.tensors.iter().enumerate() {
            if let Some(name) = e.name.strip_prefix("param:") {
                store.assign(name, &self.data[i], &e.shape)?;
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        for values in &self.data {
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path: PathBuf = path.as_ref().into();
        let buf = fs::read(&path)?;
        if buf.len() < 10 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt(format!("{} is not a checkpoint", path.display())));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let header_bytes = buf.get(10..10 + len).ok_or_else(|| Error::Corrupt("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let mut pos = 10 + len;
        let mut data = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let bytes = buf
                .get(pos..pos + 4 * n)
                .ok_or_else(|| Error::Corrupt(format!("truncated while reading tensor {}", e.name)))?;
            data.push(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
            pos += 4 * n;
        }
        if pos != buf.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", buf.len() - pos)));
        }
        Ok(Self { header, data })
    }
}

/// A trained model loaded for encoding or decoding.
pub enum LoadedCodec {
    Diffusion(DiffusionCodec),
    Baseline(BaselineCodec),
}

impl LoadedCodec {
    pub fn as_codec(&self) -> &dyn eval::Codec {
        match self {
            LoadedCodec::Diffusion(c) => c,
            LoadedCodec::Baseline(c) => c,
        }
    }
}

/// Loads whichever codec a checkpoint holds.
pub fn load_codec(path: impl AsRef<Path>) -> Result<LoadedCodec> {
    let ck = Checkpoint::read(path)?;
    match &ck.header.model {
        ModelSpec::Diffusion(spec) => {
            let seed = ck.header.training.as_ref().map_or(0, |c| c.seed);
            let codec = DiffusionCodec::new(spec.clone(), seed, DType::F32)?;
            ck.restore_params(codec.params())?;
            Ok(LoadedCodec::Diffusion(codec))
        }
        ModelSpec::Baseline(spec) => {
            let codec = BaselineCodec::new(spec.config.clone(), spec.normalizer, 0, DType::F32)?;
            ck.restore_params(codec.params())?;
            Ok(LoadedCodec::Baseline(codec))
        }
    }
}

/// Scalar total-loss value of a tensor graph, used by probes.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
