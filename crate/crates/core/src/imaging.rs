//! RGB image buffers and the resampling filters shared by the degradation
//! chain, the latent codec and the metrics.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Interleaved RGB image with samples on the 0..=255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "RgbImage::new",
                &[height, width, 3],
                &[data.len()],
            ));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        RgbImage::new(width, height, bytes.iter().map(|&b| b as f64).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Rounds and clamps every sample into `u8`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn quantized(&self) -> RgbImage {
        let data = self.to_u8().into_iter().map(f64::from).collect();
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Stable content hash used as the replay-file key for images.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.width as u32).to_le_bytes());
        hasher.update((self.height as u32).to_le_bytes());
        hasher.update(self.to_u8());
        hex(&hasher.finalize())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        RgbImage::from_u8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
    }

    /// BT.601 full-range luma of every pixel.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Full-range BT.601 RGB to YCbCr.
pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    [y, cb, cr]
}

/// Separable Gaussian blur with clamp-to-edge borders. `sigma == 0` is the identity.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let (w, h) = (img.width as isize, img.height as isize);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, w - 1);
                    acc += k * img.get(sx as usize, y as usize, c);
                }
                tmp.set(x as usize, y as usize, c, acc);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(0, h - 1);
                    acc += k * tmp.get(x as usize, sy as usize, c);
                }
                out.set(x as usize, y as usize, c, acc);
            }
        }
    }
    out
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-sample taps `(source index, weight)` along one axis.
fn cubic_taps(src_len: usize, dst_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let base = center.floor() as isize;
            let mut taps: Vec<(usize, f64)> = (base - 1..=base + 2)
                .map(|i| {
                    let w = cubic(center - i as f64);
                    (i.clamp(0, src_len as isize - 1) as usize, w)
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Bicubic resampling to `(width, height)` by point-sampling the cubic
/// interpolant at output pixel centres. Identity when the size is unchanged.
pub fn bicubic_resize(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    if width == img.width && height == img.height {
        return img.clone();
    }
    let xt = cubic_taps(img.width, width);
    let yt = cubic_taps(img.height, height);
    let mut tmp = vec![0.0; img.height * width * 3];
    for y in 0..img.height {
        for (x, taps) in xt.iter().enumerate() {
            for c in 0..3 {
                tmp[(y * width + x) * 3 + c] =
                    taps.iter().map(|&(sx, w)| w * img.get(sx, y, c)).sum();
            }
        }
    }
    let mut out = vec![0.0; height * width * 3];
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..width {
            for c in 0..3 {
                out[(y * width + x) * 3 + c] = taps
                    .iter()
                    .map(|&(sy, w)| w * tmp[(sy * width + x) * 3 + c])
                    .sum();
            }
        }
    }
    RgbImage {
        width,
        height,
        data: out,
    }
}
