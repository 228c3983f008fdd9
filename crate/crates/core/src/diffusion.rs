//! Noise schedule, forward perturbation and deterministic DDIM decoding.

use candle_core::{DType, Device, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on per-step betas.
pub const MAX_BETA: f64 = 0.999;
/// Floor applied to `1 - alpha_bar` and its square root in divisions.
pub const DENOM_FLOOR: f64 = 1e-12;

/// Per-step variances. `alpha_bar[0] = 1`; `beta`/`alpha` are indexed by
/// `t - 1` for `t` in `1..=steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `alpha_bar(t) = f(t) / f(0)` with
    /// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`, betas clipped at 0.999 and
    /// `alpha_bar` rebuilt as the running product of `1 - beta`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let beta: Vec<f64> = (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA)).collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if beta.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimeStep { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Loss weight `alpha_bar_t / (1 - alpha_bar_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar(t) / (1.0 - self.alpha_bar(t)).max(DENOM_FLOOR)
    }
}

/// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn perturb(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("z_0 {:?} vs noise {:?}", z0.dims(), eps.dims())));
    }
    let ab = schedule.alpha_bar(t);
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// [`perturb`] with one step per element of the leading batch dimension.
pub fn perturb_batch(z0: &Tensor, steps: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("z_0 {:?} vs noise {:?}", z0.dims(), eps.dims())));
    }
    if z0.dim(0)? != steps.len() {
        return Err(Error::Shape(format!("{} steps for a batch of {}", steps.len(), z0.dim(0)?)));
    }
    for &t in steps {
        schedule.check_step(t)?;
    }
    let per_sample = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = steps.iter().map(|&t| f(schedule.alpha_bar(t))).collect();
        let mut shape = vec![steps.len()];
        shape.extend(std::iter::repeat_n(1, z0.rank() - 1));
        Ok(Tensor::from_vec(v, shape, z0.device())?.to_dtype(z0.dtype())?)
    };
    let signal = per_sample(&|ab| ab.sqrt())?;
    let noise = per_sample(&|ab| (1.0 - ab).sqrt())?;
    Ok((z0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// Mean of the reverse transition:
/// `(1/sqrt(alpha_t)) (z_t - beta_t (z_t - sqrt(alpha_bar_t) z0_hat) / (1 - alpha_bar_t))`.
pub fn mu(z_t: &Tensor, predicted_z0: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let residual = (z_t - (predicted_z0 * ab.sqrt())?)?;
    let correction = (residual * (schedule.beta(t) / (1.0 - ab).max(DENOM_FLOOR)))?;
    Ok(((z_t - correction)? * schedule.alpha(t).sqrt().recip())?)
}

/// Anything that predicts the clean target from a noisy state at step `t`.
/// Conditioning (codeword features, side information) is bound inside.
pub trait Denoiser {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        self(z_t, t)
    }
}

/// One deterministic update from `z_t` to `z_{t-1}` given the prediction.
pub fn ddim_step(z_t: &Tensor, predicted_z0: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let noise_dir = ((z_t - (predicted_z0 * ab.sqrt())?)? * (1.0 - ab).sqrt().max(DENOM_FLOOR).recip())?;
    Ok(((predicted_z0 * ab_prev.sqrt())? + (noise_dir * (1.0 - ab_prev).sqrt())?)?)
}

/// Runs the backward process from `z_T = 0` down to `z_0`, calling the
/// denoiser exactly `T` times.
pub fn ddim_decode(
    denoiser: &impl Denoiser,
    schedule: &NoiseSchedule,
    shape: impl Into<Shape>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut z = Tensor::zeros(shape, dtype, device)?;
    for t in (1..=schedule.steps()).rev() {
        let pred = denoiser.predict(&z, t)?;
        if pred.shape() != z.shape() {
            return Err(Error::Shape(format!("denoiser returned {:?} for state {:?}", pred.dims(), z.dims())));
        }
        z = ddim_step(&z, &pred, t, schedule)?;
    }
    Ok(z)
}
