//! Classifier-free guidance with optional per-branch negative prompts.
//!
//! The guided prediction is `ε̃ = ε̂ + λ_s (ε̂ − ε̂_neg)`, where `ε̂_neg` comes
//! from one denoiser pass whose textual priors are the encoded negatives.
//! Both passes share the LR latent and the LR feature tokens.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffusion::{Conditioning, LatentTensor, NoisePredictor};
use crate::error::{Error, Result};
use crate::prior::{
    encode_global, encode_hf, encode_lf, encode_token_rows, Embeddings, PriorBundle, PriorKind,
    TextEncoder, TextGranularity,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfgMode {
    None,
    Single,
    #[default]
    Multi,
}

impl std::str::FromStr for CfgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CfgMode::None),
            "single" => Ok(CfgMode::Single),
            "multi" => Ok(CfgMode::Multi),
            other => Err(Error::config(format!(
                "unknown cfg mode '{other}' (none|single|multi)"
            ))),
        }
    }
}

// Placeholder negatives; the published work does not list its prompts.
pub const DEFAULT_NEG_GLOBAL: &str = "wrong layout, duplicated objects";
pub const DEFAULT_NEG_LF: &str = "distorted shape, wrong proportions";
pub const DEFAULT_NEG_HF: &str = "oversmoothed, noisy texture, ringing artifacts";
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSpec {
    pub mode: CfgMode,
    pub lambda_s: f64,
    pub neg_global: String,
    pub neg_lf: Vec<String>,
    pub neg_hf: Vec<String>,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec {
            mode: CfgMode::Multi,
            lambda_s: DEFAULT_GUIDANCE_SCALE,
            neg_global: DEFAULT_NEG_GLOBAL.to_string(),
            neg_lf: vec![DEFAULT_NEG_LF.to_string()],
            neg_hf: vec![DEFAULT_NEG_HF.to_string()],
        }
    }
}

impl GuidanceSpec {
    pub fn none() -> Self {
        GuidanceSpec {
            mode: CfgMode::None,
            ..GuidanceSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s.is_finite() && self.lambda_s >= 0.0) {
            return Err(Error::config(format!(
                "guidance.lambda_s must be finite and >= 0, got {}",
                self.lambda_s
            )));
        }
        Ok(())
    }

    /// Encodes the negatives. `single` uses `neg_global` in all three slots.
    pub fn resolve(
        &self,
        encoder: &dyn TextEncoder,
        granularity: TextGranularity,
    ) -> Result<Guidance> {
        self.validate()?;
        let negative = match self.mode {
            CfgMode::None => None,
            CfgMode::Single => Some(negative_bundle(
                &self.neg_global,
                std::slice::from_ref(&self.neg_global),
                std::slice::from_ref(&self.neg_global),
                encoder,
                granularity,
            )?),
            CfgMode::Multi => Some(negative_bundle(
                &self.neg_global,
                &self.neg_lf,
                &self.neg_hf,
                encoder,
                granularity,
            )?),
        };
        Ok(Guidance {
            lambda_s: self.lambda_s,
            negative,
        })
    }
}

fn negative_bundle(
    global: &str,
    lf: &[String],
    hf: &[String],
    encoder: &dyn TextEncoder,
    granularity: TextGranularity,
) -> Result<PriorBundle> {
    match granularity {
        TextGranularity::Pooled => {
            let mut g = Embeddings::empty(encoder.dim());
            g.push(encode_global(global, encoder)?, !global.trim().is_empty())?;
            Ok(PriorBundle {
                global: g,
                lf: encode_lf(lf, encoder)?,
                hf: encode_hf(hf, encoder)?,
            })
        }
        TextGranularity::Tokens => {
            let lf: Vec<&str> = lf.iter().map(String::as_str).collect();
            let hf: Vec<&str> = hf.iter().map(String::as_str).collect();
            Ok(PriorBundle {
                global: encode_token_rows(&[global], PriorKind::Global, encoder)?,
                lf: encode_token_rows(&lf, PriorKind::Lf, encoder)?,
                hf: encode_token_rows(&hf, PriorKind::Hf, encoder)?,
            })
        }
    }
}

/// Guidance ready for sampling: the scale plus the encoded negative priors,
/// or `None` when guidance is off.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub lambda_s: f64,
    pub negative: Option<PriorBundle>,
}

impl Guidance {
    pub fn disabled() -> Self {
        Guidance {
            lambda_s: 0.0,
            negative: None,
        }
    }

    pub fn with_negative(lambda_s: f64, negative: PriorBundle) -> Self {
        Guidance {
            lambda_s,
            negative: Some(negative),
        }
    }
}

/// `eps + lambda_s * (eps − eps_neg)`, elementwise.
pub fn combine_guidance(
    eps: &LatentTensor,
    eps_neg: &LatentTensor,
    lambda_s: f64,
) -> Result<LatentTensor> {
    if eps.shape() != eps_neg.shape() {
        return Err(Error::shape(
            "combine_guidance",
            &eps.shape(),
            &eps_neg.shape(),
        ));
    }
    let data = eps
        .data()
        .iter()
        .zip(eps_neg.data())
        .map(|(p, n)| p + lambda_s * (p - n))
        .collect();
    let [c, h, w] = eps.shape();
    LatentTensor::new(c, h, w, data)
}

/// Guided noise prediction. One denoiser call without negatives, two with.
pub fn guided_noise(
    denoiser: &dyn NoisePredictor,
    z_t: &LatentTensor,
    t: usize,
    cond: &Conditioning<'_>,
    guidance: &Guidance,
) -> Result<LatentTensor> {
    let check = |eps: LatentTensor| {
        if eps.shape() != z_t.shape() {
            return Err(Error::shape("denoiser output", &z_t.shape(), &eps.shape()));
        }
        if !eps.all_finite() {
            return Err(Error::NonFinite("denoiser output"));
        }
        Ok(eps)
    };
    let eps = check(denoiser.predict_noise(z_t, t, cond)?)?;
    let Some(negative) = &guidance.negative else {
        return Ok(eps);
    };
    let eps_neg = check(denoiser.predict_noise(z_t, t, &cond.with_priors(negative))?)?;
    combine_guidance(&eps, &eps_neg, guidance.lambda_s)
}

/// Wraps a predictor and counts its evaluations.
pub struct CountingPredictor<'a> {
    inner: &'a dyn NoisePredictor,
    calls: AtomicUsize,
}

impl<'a> CountingPredictor<'a> {
    pub fn new(inner: &'a dyn NoisePredictor) -> Self {
        CountingPredictor {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl NoisePredictor for CountingPredictor<'_> {
    fn predict_noise(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &Conditioning<'_>,
    ) -> Result<LatentTensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise(z_t, t, cond)
    }
}
