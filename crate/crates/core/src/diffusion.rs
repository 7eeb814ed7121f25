//! Noise schedule, forward process, DDPM reverse step and the sampling loop.
//!
//! Nothing here knows what the denoiser looks like; it only needs something
//! implementing [`NoisePredictor`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{guided_noise, Guidance};
use crate::prior::{LrFeatureTokens, PriorBundle};
use crate::rng::normal_vec;
use crate::tensor::Array;

/// Latent feature map of shape `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::config("latent dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "LatentTensor::new",
                &[channels, height, width],
                &[data.len()],
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent tensor"));
        }
        Ok(LatentTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        LatentTensor {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        let mut z = LatentTensor::zeros(shape);
        z.data.iter_mut().for_each(|v| *v = value);
        z
    }

    /// Standard normal draws from the counter-based stream `(seed, stream)`.
    pub fn standard_normal(shape: [usize; 3], seed: u64, stream: u64) -> Self {
        let n = shape.iter().product();
        LatentTensor {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            data: normal_vec(seed, stream, n),
        }
    }

    pub fn from_array(a: &Array) -> Result<Self> {
        let s = a.shape();
        if s.len() != 3 {
            return Err(Error::shape("LatentTensor::from_array", &[0, 0, 0], s));
        }
        LatentTensor::new(s[0], s[1], s[2], a.data().to_vec())
    }

    pub fn to_array(&self) -> Array {
        Array::from_vec(&self.shape(), self.data.clone()).expect("consistent shape")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_same_shape(&self, other: &LatentTensor, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, &self.shape(), &other.shape()));
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: f64, other: &LatentTensor, b: f64) -> Result<LatentTensor> {
        self.ensure_same_shape(other, "LatentTensor::axpby")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(LatentTensor {
            data,
            ..self.clone()
        })
    }
}

/// Per-timestep β, α = 1 − β and ᾱ = running product of α.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule from `beta_start` to `beta_end` over `num_steps`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            (0..num_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64)
                .collect()
        };
        NoiseSchedule::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(Error::OutOfRange {
                what: "timestep",
                index: t,
                len: self.num_steps(),
            });
        }
        Ok(())
    }

    /// ᾱ at `t - 1`, with ᾱ_{-1} = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Linear schedule constructor with the conventional argument order.
pub fn make_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(num_steps, beta_start, beta_end)
}

/// `√ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
pub fn forward_diffuse(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    schedule.check_timestep(t)?;
    let ab = schedule.alpha_bars[t];
    forward_diffuse_with(z0, ab, eps)
}

/// Forward process for an explicit ᾱ in `[0, 1]`.
pub fn forward_diffuse_with(
    z0: &LatentTensor,
    alpha_bar: f64,
    eps: &LatentTensor,
) -> Result<LatentTensor> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::config(format!(
            "alpha_bar {alpha_bar} outside [0, 1]"
        )));
    }
    z0.axpby(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

/// Conditioning shared by every denoiser evaluation for one image.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub lr_latent: &'a LatentTensor,
    pub priors: &'a PriorBundle,
    pub lr_tokens: &'a LrFeatureTokens,
}

impl<'a> Conditioning<'a> {
    pub fn with_priors<'b>(&self, priors: &'b PriorBundle) -> Conditioning<'b>
    where
        'a: 'b,
    {
        Conditioning {
            lr_latent: self.lr_latent,
            priors,
            lr_tokens: self.lr_tokens,
        }
    }
}

/// Anything that predicts the injected noise ε from `(z_t, t, conditioning)`.
pub trait NoisePredictor: Sync {
    fn predict_noise(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning<'_>,
    ) -> Result<LatentTensor>;
}

/// Per-element mean of `(eps − eps_hat)²` where `eps_hat` is the prediction at
/// `z_t = forward_diffuse(z0, t, eps)`.
pub fn training_loss(
    denoiser: &dyn NoisePredictor,
    z0: &LatentTensor,
    cond: &Conditioning<'_>,
    t: usize,
    eps: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let z_t = forward_diffuse(z0, t, eps, schedule)?;
    let eps_hat = denoiser.predict_noise(&z_t, t, cond)?;
    eps.ensure_same_shape(&eps_hat, "training_loss")?;
    if !eps_hat.all_finite() {
        return Err(Error::NonFinite("denoiser output"));
    }
    let sse: f64 = eps
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / eps.len() as f64)
}

/// Variance of the noise injected by each reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorVariance {
    /// β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)
    #[default]
    Posterior,
    /// β_t
    Beta,
}

/// One ancestral DDPM step from `z_t` to `z_{t−1}`.
///
/// The mean is `(z_t − β_t/√(1−ᾱ_t) · eps_hat) / √α_t`. For `t > 0`,
/// `√σ²_t · noise` is added; at `t = 0` the noise argument is ignored.
pub fn ddpm_step(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&LatentTensor>,
    variance: PosteriorVariance,
) -> Result<LatentTensor> {
    schedule.check_timestep(t)?;
    if !z_t.all_finite() || !eps_hat.all_finite() {
        return Err(Error::NonFinite("ddpm_step input"));
    }
    let beta = schedule.betas[t];
    let alpha = schedule.alphas[t];
    let ab = schedule.alpha_bars[t];
    let mean = z_t.axpby(
        1.0 / alpha.sqrt(),
        eps_hat,
        -beta / ((1.0 - ab).sqrt() * alpha.sqrt()),
    )?;
    match noise {
        Some(n) if t > 0 => {
            let var = match variance {
                PosteriorVariance::Posterior => {
                    beta * (1.0 - schedule.alpha_bar_prev(t)) / (1.0 - ab)
                }
                PosteriorVariance::Beta => beta,
            };
            mean.axpby(1.0, n, var.sqrt())
        }
        _ => Ok(mean),
    }
}

/// Reverse-process timesteps and the matching respaced schedule.
///
/// With `k` sampling steps over a `T`-step training schedule, the model is
/// evaluated at `τ_i = i · (T / k)`; the respaced schedule has
/// `ᾱ'_i = ᾱ_{τ_i}` and `β'_i = 1 − ᾱ'_i / ᾱ'_{i−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    schedule: NoiseSchedule,
    timesteps: Vec<usize>,
    variance: PosteriorVariance,
}

/// Stream id for the initial latent noise; step noise uses the model timestep.
pub const INITIAL_NOISE_STREAM: u64 = u64::MAX;

impl SamplingPlan {
    pub fn new(train: &NoiseSchedule, steps: usize, variance: PosteriorVariance) -> Result<Self> {
        let total = train.num_steps();
        if steps == 0 || steps > total {
            return Err(Error::config(format!(
                "sampling steps must be in 1..={total}, got {steps}"
            )));
        }
        if steps == total {
            return Ok(SamplingPlan {
                schedule: train.clone(),
                timesteps: (0..total).collect(),
                variance,
            });
        }
        let stride = total / steps;
        let timesteps: Vec<usize> = (0..steps).map(|i| i * stride).collect();
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(steps);
        for &t in &timesteps {
            let ab = train.alpha_bars[t];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Ok(SamplingPlan {
            schedule: NoiseSchedule::from_betas(betas)?,
            timesteps,
            variance,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Model timestep for each respaced step, ascending.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn variance(&self) -> PosteriorVariance {
        self.variance
    }
}

/// Runs the full reverse process and returns the final `z_0` estimate.
///
/// The result is a pure function of the predictor, inputs and `seed`.
pub fn sample(
    denoiser: &dyn NoisePredictor,
    cond: &Conditioning<'_>,
    guidance: &Guidance,
    plan: &SamplingPlan,
    seed: u64,
) -> Result<LatentTensor> {
    let shape = cond.lr_latent.shape();
    let mut z = LatentTensor::standard_normal(shape, seed, INITIAL_NOISE_STREAM);
    for i in (0..plan.timesteps.len()).rev() {
        let t_model = plan.timesteps[i];
        let eps = guided_noise(denoiser, &z, t_model, cond, guidance)?;
        let noise = (i > 0).then(|| LatentTensor::standard_normal(shape, seed, t_model as u64));
        z = ddpm_step(&z, &eps, i, &plan.schedule, noise.as_ref(), plan.variance)?;
    }
    Ok(z)
}
