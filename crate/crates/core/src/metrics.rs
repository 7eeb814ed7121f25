//! Fidelity metrics on the luma channel (BT.601 full range).

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

pub const SSIM_WINDOW: usize = 8;
/// `K1 = 0.01`, `K2 = 0.03`, dynamic range 255.
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// PSNR in dB. Identical images give `+inf`, serialized as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Psnr(pub f64);

impl Psnr {
    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr(v)),
            Raw::Text(s) if s == "inf" => Ok(Psnr(f64::INFINITY)),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "invalid PSNR value '{s}'"
            ))),
        }
    }
}

fn check_shapes(a: &RgbImage, b: &RgbImage, context: &'static str) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(
            context,
            &[a.height(), a.width()],
            &[b.height(), b.width()],
        ));
    }
    Ok(())
}

pub fn psnr(reference: &RgbImage, test: &RgbImage) -> Result<Psnr> {
    check_shapes(reference, test, "psnr")?;
    let (a, b) = (reference.luma(), test.luma());
    let mse = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr(f64::INFINITY));
    }
    Ok(Psnr(10.0 * (255.0 * 255.0 / mse).log10()))
}

/// Summed-area table with a zero first row and column.
fn integral(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// Mean SSIM over all 8x8 windows at stride 1 with uniform weights and
/// population (biased) variances.
pub fn ssim(reference: &RgbImage, test: &RgbImage) -> Result<f64> {
    check_shapes(reference, test, "ssim")?;
    let (w, h) = (reference.width(), reference.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let (a, b) = (reference.luma(), test.luma());
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let tables = [
        integral(&a, w, h),
        integral(&b, w, h),
        integral(&sq(&a), w, h),
        integral(&sq(&b), w, h),
        integral(&ab, w, h),
    ];
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let k = SSIM_WINDOW;
    let stride = w + 1;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let [sa, sb, saa, sbb, sab] = tables.each_ref().map(|s| {
                (s[(y + k) * stride + x + k] - s[y * stride + x + k] - s[(y + k) * stride + x]
                    + s[y * stride + x])
                    / n
            });
            let (va, vb, cov) = (saa - sa * sa, sbb - sb * sb, sab - sa * sb);
            total += ((2.0 * sa * sb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((sa * sa + sb * sb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// Outcome of a no-reference perceptual metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceptualScore {
    Unavailable,
    Value(f64),
}

/// Hook for no-reference perceptual metrics. None ship with the crate.
pub trait PerceptualMetric: Sync {
    fn name(&self) -> &str;
    fn score(&self, image: &RgbImage) -> PerceptualScore;
}

pub struct UnavailableMetric(pub &'static str);

impl PerceptualMetric for UnavailableMetric {
    fn name(&self) -> &str {
        self.0
    }

    fn score(&self, _image: &RgbImage) -> PerceptualScore {
        PerceptualScore::Unavailable
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let img = RgbImage::filled(16, 16, [10.0, 20.0, 30.0]);
        assert!(psnr(&img, &img).unwrap().is_infinite());
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn unit_luma_offset() {
        let a = RgbImage::filled(9, 9, [100.0, 100.0, 100.0]);
        let b = RgbImage::filled(9, 9, [101.0, 101.0, 101.0]);
        let v = psnr(&a, &b).unwrap().0;
        assert!((v - 48.130_803_608_679_1).abs() < 1e-9, "{v}");
    }

    #[test]
    fn errors() {
        let a = RgbImage::filled(8, 8, [0.0; 3]);
        let b = RgbImage::filled(8, 9, [0.0; 3]);
        assert!(psnr(&a, &b).is_err());
        let tiny = RgbImage::filled(7, 7, [0.0; 3]);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn sentinel_round_trip() {
        for p in [Psnr(f64::INFINITY), Psnr(31.5)] {
            let s = serde_json::to_string(&p).unwrap();
            assert_eq!(serde_json::from_str::<Psnr>(&s).unwrap(), p);
        }
        assert_eq!(
            serde_json::to_string(&Psnr(f64::INFINITY)).unwrap(),
            "\"inf\""
        );
        assert_eq!(
            UnavailableMetric("musiq").score(&RgbImage::filled(1, 1, [0.0; 3])),
            PerceptualScore::Unavailable
        );
    }
}
