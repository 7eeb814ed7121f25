//! Fixed-weight image-to-latent codec.
//!
//! Each non-overlapping `factor x factor` block of every RGB channel is
//! projected onto the orthonormal 2-D DCT-II basis, giving
//! `3 * factor^2` latent channels at `1/factor` the spatial resolution.
//! Equivalently, a stride-`factor` convolution with fixed orthonormal
//! filters. The transform is exactly invertible, so decoding never loses
//! information and latent-space MSE is a fixed multiple of pixel MSE.

use std::f64::consts::PI;

use crate::diffusion::LatentTensor;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

/// Latents are multiplied by this after the transform so that the DC
/// channel of a `[-1, 1]` image lies in `[-1, 1]` for the default factor.
pub const DEFAULT_LATENT_SCALE: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct DctLatentCodec {
    factor: usize,
    scale: f64,
    /// `basis[k * factor + n]`: 1-D orthonormal DCT-II.
    basis: Vec<f64>,
}

impl DctLatentCodec {
    pub fn new(factor: usize, scale: f64) -> Result<Self> {
        if factor == 0 {
            return Err(Error::config("latent factor must be positive"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config("latent scale must be positive"));
        }
        let n = factor as f64;
        let mut basis = vec![0.0; factor * factor];
        for k in 0..factor {
            let alpha = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            for i in 0..factor {
                basis[k * factor + i] =
                    alpha * (PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n)).cos();
            }
        }
        Ok(DctLatentCodec {
            factor,
            scale,
            basis,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    pub fn latent_shape(&self, width: usize, height: usize) -> [usize; 3] {
        [
            self.latent_channels(),
            height / self.factor,
            width / self.factor,
        ]
    }

    pub fn encode(&self, img: &RgbImage) -> Result<LatentTensor> {
        let f = self.factor;
        if img.width() % f != 0 || img.height() % f != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by latent factor {f}",
                img.width(),
                img.height()
            )));
        }
        let (lh, lw) = (img.height() / f, img.width() / f);
        let lc = self.latent_channels();
        let mut data = vec![0.0; lc * lh * lw];
        for c in 0..3 {
            for by in 0..lh {
                for bx in 0..lw {
                    for u in 0..f {
                        for v in 0..f {
                            let mut acc = 0.0;
                            for y in 0..f {
                                for x in 0..f {
                                    let p = img.get(bx * f + x, by * f + y, c) / 127.5 - 1.0;
                                    acc += self.basis[u * f + y] * self.basis[v * f + x] * p;
                                }
                            }
                            let ch = c * f * f + u * f + v;
                            data[(ch * lh + by) * lw + bx] = acc * self.scale;
                        }
                    }
                }
            }
        }
        LatentTensor::new(lc, lh, lw, data)
    }

    /// Inverse transform. Output samples are not clamped or rounded.
    pub fn decode(&self, z: &LatentTensor) -> Result<RgbImage> {
        let f = self.factor;
        let [lc, lh, lw] = z.shape();
        if lc != self.latent_channels() {
            return Err(Error::shape(
                "DctLatentCodec::decode",
                &[self.latent_channels()],
                &[lc],
            ));
        }
        let mut img = RgbImage::filled(lw * f, lh * f, [0.0; 3]);
        for c in 0..3 {
            for by in 0..lh {
                for bx in 0..lw {
                    for y in 0..f {
                        for x in 0..f {
                            let mut acc = 0.0;
                            for u in 0..f {
                                for v in 0..f {
                                    let ch = c * f * f + u * f + v;
                                    let coef = z.data()[(ch * lh + by) * lw + bx] / self.scale;
                                    acc += self.basis[u * f + y] * self.basis[v * f + x] * coef;
                                }
                            }
                            img.set(bx * f + x, by * f + y, c, (acc + 1.0) * 127.5);
                        }
                    }
                }
            }
        }
        Ok(img)
    }
}

impl Default for DctLatentCodec {
    fn default() -> Self {
        DctLatentCodec::new(4, DEFAULT_LATENT_SCALE).expect("valid defaults")
    }
}
