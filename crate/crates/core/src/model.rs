//! The full super-resolution model: latent codec, prior encoders and the
//! denoiser, wired together for training and restoration.

use crate::checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
use crate::config::RunConfig;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{sample, Conditioning, LatentTensor, NoiseSchedule, SamplingPlan};
use crate::error::{Error, Result};
use crate::guidance::{Guidance, GuidanceSpec};
use crate::imaging::{bicubic_resize, RgbImage};
use crate::latent::DctLatentCodec;
use crate::prior::{
    encode_priors, CaptionSet, HashTextEncoder, ImageFeatureEncoder, LrFeatureTokens,
    PatchTokenizer, PriorBundle, ReplayImageEncoder, ReplayStore, ReplayTextEncoder, TextEncoder,
};

/// Denoiser inputs derived from one LR image and its captions.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub lr_latent: LatentTensor,
    pub priors: PriorBundle,
    pub lr_tokens: LrFeatureTokens,
}

impl Prepared {
    pub fn conditioning(&self) -> Conditioning<'_> {
        Conditioning {
            lr_latent: &self.lr_latent,
            priors: &self.priors,
            lr_tokens: &self.lr_tokens,
        }
    }
}

pub struct SrModel {
    pub config: RunConfig,
    pub denoiser: Denoiser,
    codec: DctLatentCodec,
    text: Box<dyn TextEncoder>,
    image: Box<dyn ImageFeatureEncoder>,
    schedule: NoiseSchedule,
}

impl SrModel {
    pub fn new(config: RunConfig, denoiser: Denoiser) -> Result<Self> {
        config.validate()?;
        let p = &config.priors;
        let codec = DctLatentCodec::new(p.latent_factor, p.latent_scale)?;
        let text_dim = config.denoiser.text_dim;
        let text: Box<dyn TextEncoder> = match &p.text_replay {
            Some(path) => Box::new(ReplayTextEncoder::new(ReplayStore::load(path)?, text_dim)),
            None => Box::new(HashTextEncoder::new(text_dim)?),
        };
        let lr_side = config.dataset.image_size / config.dataset.degradation.downscale_factor;
        let tokenizer = PatchTokenizer::new(
            lr_side,
            p.lr_patch,
            config.denoiser.lr_token_dim,
            p.tokenizer_seed,
        )?;
        let image: Box<dyn ImageFeatureEncoder> = match &p.image_replay {
            Some(path) => Box::new(ReplayImageEncoder::new(
                ReplayStore::load(path)?,
                tokenizer.token_count(),
                tokenizer.token_dim(),
            )),
            None => Box::new(tokenizer),
        };
        let schedule = config.diffusion.schedule()?;
        Ok(SrModel {
            config,
            denoiser,
            codec,
            text,
            image,
            schedule,
        })
    }

    /// Freshly initialized model.
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let denoiser = Denoiser::new(config.denoiser.clone(), config.train.seed)?;
        SrModel::new(config, denoiser)
    }

    /// Model from a checkpoint; runtime settings come from `runtime`.
    pub fn from_checkpoint(ckpt: &Checkpoint, runtime: &RunConfig) -> Result<Self> {
        let config = ckpt.runtime_config(runtime);
        let denoiser = Denoiser::from_params(config.denoiser.clone(), ckpt.params.clone())?;
        SrModel::new(config, denoiser)
    }

    pub fn checkpoint(&self, iteration: u64, optimizer: Option<crate::nn::AdamW>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            iteration,
            params: self.denoiser.params().clone(),
            optimizer,
        }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn text_encoder(&self) -> &dyn TextEncoder {
        self.text.as_ref()
    }

    pub fn hr_side(&self) -> usize {
        self.config.dataset.image_size
    }

    pub fn lr_side(&self) -> usize {
        self.config.dataset.image_size / self.config.dataset.degradation.downscale_factor
    }

    pub fn encode_hr(&self, hr: &RgbImage) -> Result<LatentTensor> {
        let s = self.hr_side();
        if hr.width() != s || hr.height() != s {
            return Err(Error::shape(
                "HR image",
                &[s, s],
                &[hr.height(), hr.width()],
            ));
        }
        self.codec.encode(hr)
    }

    pub fn encode_captions(&self, captions: &CaptionSet) -> Result<PriorBundle> {
        encode_priors(captions, self.text.as_ref(), self.config.priors.granularity)
    }

    /// Conditioning for one LR image. The LR latent is the codec applied to
    /// the bicubic upsampling of the LR image.
    pub fn prepare(&self, lr: &RgbImage, captions: &CaptionSet) -> Result<Prepared> {
        self.prepare_with_priors(lr, self.encode_captions(captions)?)
    }

    pub fn prepare_with_priors(&self, lr: &RgbImage, priors: PriorBundle) -> Result<Prepared> {
        let s = self.lr_side();
        if lr.width() != s || lr.height() != s {
            return Err(Error::shape(
                "LR image",
                &[s, s],
                &[lr.height(), lr.width()],
            ));
        }
        let up = bicubic_resize(lr, self.hr_side(), self.hr_side());
        Ok(Prepared {
            lr_latent: self.codec.encode(&up)?,
            priors,
            lr_tokens: self.image.encode(lr)?,
        })
    }

    /// Same weights under a different branch layout and guidance.
    pub fn variant(&self, denoiser: DenoiserConfig, guidance: GuidanceSpec) -> Result<SrModel> {
        let mut config = self.config.clone();
        config.denoiser = denoiser.clone();
        config.guidance = guidance;
        SrModel::new(config, self.denoiser.with_config(denoiser)?)
    }

    pub fn sampling_plan(&self) -> Result<SamplingPlan> {
        let d = &self.config.diffusion;
        SamplingPlan::new(&self.schedule, d.sampling_steps, d.variance)
    }

    /// Guidance from the runtime config, with negatives encoded by this model's text encoder.
    pub fn guidance(&self) -> Result<Guidance> {
        self.config
            .guidance
            .resolve(self.text.as_ref(), self.config.priors.granularity)
    }

    /// Samples a latent and decodes it to an 8-bit HR image.
    pub fn restore(&self, prepared: &Prepared, guidance: &Guidance, seed: u64) -> Result<RgbImage> {
        let plan = self.sampling_plan()?;
        let z = sample(
            &self.denoiser,
            &prepared.conditioning(),
            guidance,
            &plan,
            seed,
        )?;
        Ok(self.codec.decode(&z)?.quantized())
    }
}
