//! Procedural scenes with exact per-object segmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::rng::{keyed_rng, splitmix64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Rectangle,
    Triangle,
    StripeBand,
}

impl Shape {
    pub const ALL: [Shape; 4] = [
        Shape::Circle,
        Shape::Rectangle,
        Shape::Triangle,
        Shape::StripeBand,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Solid,
    Stripes,
    Dots,
    Checker,
    NoiseGrain,
}

impl Texture {
    pub const ALL: [Texture; 5] = [
        Texture::Solid,
        Texture::Stripes,
        Texture::Dots,
        Texture::Checker,
        Texture::NoiseGrain,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    Horizontal,
    Vertical,
    Diagonal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [
        Orientation::Horizontal,
        Orientation::Vertical,
        Orientation::Diagonal,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Orange,
    Purple,
    Pink,
    Cyan,
    Brown,
    White,
    Black,
    Gray,
}

impl Color {
    pub const ALL: [Color; 12] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Orange,
        Color::Purple,
        Color::Pink,
        Color::Cyan,
        Color::Brown,
        Color::White,
        Color::Black,
        Color::Gray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::Pink => "pink",
            Color::Cyan => "cyan",
            Color::Brown => "brown",
            Color::White => "white",
            Color::Black => "black",
            Color::Gray => "gray",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [210.0, 40.0, 40.0],
            Color::Green => [40.0, 170.0, 60.0],
            Color::Blue => [40.0, 70.0, 200.0],
            Color::Yellow => [230.0, 210.0, 50.0],
            Color::Orange => [235.0, 140.0, 30.0],
            Color::Purple => [130.0, 50.0, 170.0],
            Color::Pink => [235.0, 130.0, 180.0],
            Color::Cyan => [50.0, 200.0, 210.0],
            Color::Brown => [120.0, 75.0, 40.0],
            Color::White => [235.0, 235.0, 235.0],
            Color::Black => [25.0, 25.0, 25.0],
            Color::Gray => [128.0, 128.0, 128.0],
        }
    }
}

/// One object, drawn inside its bounding box `[x, x + width) x [y, y + height)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub color: Color,
    pub texture: Texture,
    pub orientation: Orientation,
}

/// A canvas, a background colour and objects in drawing order (later on top).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: Color,
    pub objects: Vec<SceneObject>,
    /// Seeds the noise-grain texture.
    pub texture_seed: u64,
}

/// Pixels owned by one object. Ids are object indices in `SceneSpec::objects`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRegion {
    pub segment_id: usize,
    pub mask: Vec<bool>,
    pub area: usize,
}

/// Peak-to-peak texture modulation on the 0..255 scale is twice this.
pub const TEXTURE_AMPLITUDE: f64 = 35.0;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("scene canvas must be non-empty"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.width == 0
                || o.height == 0
                || o.x + o.width > self.width
                || o.y + o.height > self.height
            {
                return Err(Error::config(format!(
                    "object {i} box ({}, {}, {}x{}) outside {}x{} canvas",
                    o.x, o.y, o.width, o.height, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    /// Random scene with `min_objects..=max_objects` objects.
    pub fn random(size: usize, min_objects: usize, max_objects: usize, seed: u64) -> Result<Self> {
        if size < 16 {
            return Err(Error::config("scene size must be at least 16"));
        }
        if min_objects > max_objects {
            return Err(Error::config("min_objects exceeds max_objects"));
        }
        let mut rng = keyed_rng(seed, 0);
        let background = Color::ALL[rng.random_range(0..Color::ALL.len())];
        let n = rng.random_range(min_objects..=max_objects);
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let orientation = Orientation::ALL[rng.random_range(0..Orientation::ALL.len())];
            let (lo, hi) = (size * 3 / 16, size * 5 / 8);
            let (mut w, mut h) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            if shape == Shape::StripeBand {
                let long = rng.random_range(size / 2..=size);
                let thin = rng.random_range(size / 10..=size / 6);
                (w, h) = match orientation {
                    Orientation::Horizontal => (long, thin),
                    Orientation::Vertical => (thin, long),
                    Orientation::Diagonal => (long.min(size * 3 / 4), long.min(size * 3 / 4)),
                };
            }
            let x = rng.random_range(0..=size - w);
            let y = rng.random_range(0..=size - h);
            let color = loop {
                let c = Color::ALL[rng.random_range(0..Color::ALL.len())];
                if c != background {
                    break c;
                }
            };
            let texture = Texture::ALL[rng.random_range(0..Texture::ALL.len())];
            objects.push(SceneObject {
                shape,
                x,
                y,
                width: w,
                height: h,
                color,
                texture,
                orientation,
            });
        }
        Ok(SceneSpec {
            width: size,
            height: size,
            background,
            objects,
            texture_seed: seed,
        })
    }
}

/// Whether pixel `(px, py)` is inside the object's shape.
pub fn covers(o: &SceneObject, px: usize, py: usize) -> bool {
    if px < o.x || py < o.y || px >= o.x + o.width || py >= o.y + o.height {
        return false;
    }
    // normalized coordinates of the pixel centre inside the box, in [0, 1)
    let u = (px - o.x) as f64 + 0.5;
    let v = (py - o.y) as f64 + 0.5;
    let (w, h) = (o.width as f64, o.height as f64);
    let (u, v) = (u / w, v / h);
    match o.shape {
        Shape::Rectangle => true,
        Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Shape::Triangle => match o.orientation {
            // apex at top centre
            Orientation::Vertical => (u - 0.5).abs() <= 0.5 * v,
            // apex at right centre
            Orientation::Horizontal => (v - 0.5).abs() <= 0.5 * u,
            // lower-left half of the box
            Orientation::Diagonal => v >= u,
        },
        Shape::StripeBand => match o.orientation {
            Orientation::Diagonal => (u - v).abs() <= 0.2,
            _ => true,
        },
    }
}

fn texture_value(o: &SceneObject, index: usize, px: usize, py: usize, seed: u64) -> f64 {
    let (lx, ly) = (px - o.x, py - o.y);
    match o.texture {
        Texture::Solid => 0.0,
        Texture::Stripes => {
            let coord = match o.orientation {
                Orientation::Horizontal => ly,
                Orientation::Vertical => lx,
                Orientation::Diagonal => lx + ly,
            };
            if (coord / 2) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        Texture::Dots => {
            if lx % 4 >= 1 && lx % 4 <= 2 && ly % 4 >= 1 && ly % 4 <= 2 {
                -1.0
            } else {
                0.3
            }
        }
        Texture::Checker => {
            if (lx / 2 + ly / 2) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        Texture::NoiseGrain => {
            let mut state = seed ^ ((index as u64) << 48) ^ ((py as u64) << 24) ^ px as u64;
            let r = splitmix64(&mut state);
            (r >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
    }
}

/// Renders the scene and returns one region per object.
///
/// Each pixel belongs to the last object covering it, so masks are pairwise
/// disjoint and together with the background cover the canvas.
pub fn generate_scene(spec: &SceneSpec) -> Result<(RgbImage, Vec<SegmentRegion>)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut img = RgbImage::filled(w, h, spec.background.rgb());
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for (i, o) in spec.objects.iter().enumerate() {
        for py in o.y..o.y + o.height {
            for px in o.x..o.x + o.width {
                if covers(o, px, py) {
                    owner[py * w + px] = Some(i);
                }
            }
        }
    }
    for py in 0..h {
        for px in 0..w {
            if let Some(i) = owner[py * w + px] {
                let o = &spec.objects[i];
                let t = TEXTURE_AMPLITUDE * texture_value(o, i, px, py, spec.texture_seed);
                let base = o.color.rgb();
                for (c, b) in base.iter().enumerate() {
                    img.set(px, py, c, (b + t).clamp(0.0, 255.0).round());
                }
            }
        }
    }
    let regions = (0..spec.objects.len())
        .map(|i| {
            let mask: Vec<bool> = owner.iter().map(|o| *o == Some(i)).collect();
            let area = mask.iter().filter(|&&m| m).count();
            SegmentRegion {
                segment_id: i,
                mask,
                area,
            }
        })
        .collect();
    Ok((img, regions))
}
