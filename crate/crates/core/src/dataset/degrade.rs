//! Parametric degradation: Gaussian blur, bicubic downscale, additive
//! Gaussian noise, uniform quantization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, gaussian_blur, RgbImage};
use crate::rng::{derive_seed, keyed_rng, normal_vec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationParams {
    pub blur_sigma: f64,
    pub downscale_factor: usize,
    pub noise_sigma: f64,
    pub quantization_levels: u32,
}

impl Default for DegradationParams {
    fn default() -> Self {
        DegradationParams {
            blur_sigma: 1.0,
            downscale_factor: 4,
            noise_sigma: 2.0,
            quantization_levels: 256,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(Error::config("blur_sigma must be finite and >= 0"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if self.downscale_factor == 0 {
            return Err(Error::config("downscale_factor must be >= 1"));
        }
        if self.quantization_levels < 2 {
            return Err(Error::config("quantization_levels must be >= 2"));
        }
        Ok(())
    }
}

/// Ranges the dataset builder samples degradations from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationRanges {
    pub blur_sigma: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub downscale_factor: usize,
    pub quantization_levels: u32,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        DegradationRanges {
            blur_sigma: [0.8, 1.6],
            noise_sigma: [0.0, 4.0],
            downscale_factor: 4,
            quantization_levels: 256,
        }
    }
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return Err(Error::config(format!(
                    "degradation.{name} range must satisfy 0 <= lo <= hi"
                )));
            }
        }
        DegradationParams {
            blur_sigma: self.blur_sigma[0],
            downscale_factor: self.downscale_factor,
            noise_sigma: self.noise_sigma[0],
            quantization_levels: self.quantization_levels,
        }
        .validate()
    }

    pub fn sample(&self, seed: u64) -> DegradationParams {
        let mut rng = keyed_rng(seed, 0);
        let mut draw = |[lo, hi]: [f64; 2]| lo + (hi - lo) * rng.random::<f64>();
        DegradationParams {
            blur_sigma: draw(self.blur_sigma),
            downscale_factor: self.downscale_factor,
            noise_sigma: draw(self.noise_sigma),
            quantization_levels: self.quantization_levels,
        }
    }
}

/// Uniform quantization of `[0, 255]` to `levels` evenly spaced values.
pub fn quantize(v: f64, levels: u32) -> f64 {
    let step = 255.0 / (levels - 1) as f64;
    ((v.clamp(0.0, 255.0) / step).round() * step).clamp(0.0, 255.0)
}

/// Degrades `hr`. The output is rounded to 8-bit values so it survives a PNG
/// round trip exactly. Noise is drawn from a stream derived from `seed`.
pub fn degrade(hr: &RgbImage, params: &DegradationParams, seed: u64) -> Result<RgbImage> {
    params.validate()?;
    let f = params.downscale_factor;
    if hr.width() % f != 0 || hr.height() % f != 0 {
        return Err(Error::config(format!(
            "downscale factor {f} does not divide {}x{}",
            hr.width(),
            hr.height()
        )));
    }
    let blurred = gaussian_blur(hr, params.blur_sigma);
    let mut lr = bicubic_resize(&blurred, hr.width() / f, hr.height() / f);
    if params.noise_sigma > 0.0 {
        let noise = normal_vec(derive_seed(seed, 0x6e6f_6973_65), 0, lr.data().len());
        for (v, n) in lr.data_mut().iter_mut().zip(noise) {
            *v += params.noise_sigma * n;
        }
    }
    for v in lr.data_mut() {
        *v = quantize(*v, params.quantization_levels);
    }
    Ok(lr.quantized())
}
