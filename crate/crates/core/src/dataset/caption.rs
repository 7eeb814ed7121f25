//! Rule-based captions, top-k segment selection and caption corruption.
//!
//! The low-frequency template only uses words from [`LF_VOCABULARY`] and the
//! high-frequency template only words from [`HF_VOCABULARY`]; the two sets are
//! disjoint.

use rand::Rng;

use super::scene::{Orientation, SceneObject, SceneSpec, SegmentRegion, Shape, Texture};
use crate::prior::CaptionSet;
use crate::rng::keyed_rng;

pub const CORRUPTION_TOKEN: &str = "None";

pub const LF_VOCABULARY: &[&str] = &[
    "a",
    "small",
    "medium",
    "large",
    "red",
    "green",
    "blue",
    "yellow",
    "orange",
    "purple",
    "pink",
    "cyan",
    "brown",
    "white",
    "black",
    "gray",
    "circle",
    "rectangle",
    "triangle",
    "band",
    "oriented",
    "horizontally",
    "vertically",
    "diagonally",
];

pub const HF_VOCABULARY: &[&str] = &[
    "smooth",
    "solid",
    "surface",
    "with",
    "crisp",
    "clean",
    "edges",
    "fine",
    "striped",
    "pattern",
    "dotted",
    "speckle",
    "checkered",
    "grid",
    "rough",
    "grainy",
    "soft",
    "noisy",
];

pub fn shape_word(shape: Shape) -> &'static str {
    match shape {
        Shape::Circle => "circle",
        Shape::Rectangle => "rectangle",
        Shape::Triangle => "triangle",
        Shape::StripeBand => "band",
    }
}

fn orientation_word(o: Orientation) -> &'static str {
    match o {
        Orientation::Horizontal => "horizontally",
        Orientation::Vertical => "vertically",
        Orientation::Diagonal => "diagonally",
    }
}

/// Size class from the visible area relative to the canvas.
pub fn size_word(area: usize, canvas: usize) -> &'static str {
    let frac = area as f64 / canvas as f64;
    if frac < 0.05 {
        "small"
    } else if frac < 0.15 {
        "medium"
    } else {
        "large"
    }
}

pub fn lf_caption(object: &SceneObject, area: usize, canvas: usize) -> String {
    format!(
        "a {} {} {} oriented {}",
        size_word(area, canvas),
        object.color.name(),
        shape_word(object.shape),
        orientation_word(object.orientation)
    )
}

pub fn hf_caption(texture: Texture) -> String {
    match texture {
        Texture::Solid => "smooth solid surface with crisp clean edges",
        Texture::Stripes => "fine striped pattern with crisp clean edges",
        Texture::Dots => "dotted speckle pattern with crisp clean edges",
        Texture::Checker => "checkered grid pattern with crisp clean edges",
        Texture::NoiseGrain => "rough grainy surface with soft noisy edges",
    }
    .to_string()
}

fn arrangement(spec: &SceneSpec) -> String {
    let centers: Vec<(f64, f64)> = spec
        .objects
        .iter()
        .map(|o| {
            (
                o.x as f64 + o.width as f64 / 2.0,
                o.y as f64 + o.height as f64 / 2.0,
            )
        })
        .collect();
    if centers.len() == 1 {
        let (cx, cy) = centers[0];
        let third = |v: f64, n: usize| ((3.0 * v / n as f64) as usize).min(2);
        let vertical = ["top", "middle", "bottom"][third(cy, spec.height)];
        let horizontal = ["left", "center", "right"][third(cx, spec.width)];
        return match (vertical, horizontal) {
            ("middle", "center") => "near the center".to_string(),
            (v, h) => format!("near the {v} {h}"),
        };
    }
    let spread = |f: fn(&(f64, f64)) -> f64| {
        let vals: Vec<f64> = centers.iter().map(f).collect();
        vals.iter().cloned().fold(f64::MIN, f64::max)
            - vals.iter().cloned().fold(f64::MAX, f64::min)
    };
    let (dx, dy) = (spread(|c| c.0), spread(|c| c.1));
    let tight = spec.width.min(spec.height) as f64 / 5.0;
    if dy < tight {
        "in a horizontal row".to_string()
    } else if dx < tight {
        "in a vertical column".to_string()
    } else {
        "scattered across the canvas".to_string()
    }
}

pub fn global_caption(spec: &SceneSpec) -> String {
    let bg = spec.background.name();
    match spec.objects.len() {
        0 => format!("a plain {bg} background with 0 objects"),
        1 => format!(
            "a plain {bg} background with 1 object {}",
            arrangement(spec)
        ),
        n => format!(
            "a plain {bg} background with {n} objects {}",
            arrangement(spec)
        ),
    }
}

/// Captions for the given regions, in the order given. Callers normally pass
/// the output of [`select_top_segments`].
pub fn caption_scene(spec: &SceneSpec, regions: &[SegmentRegion]) -> CaptionSet {
    let canvas = spec.width * spec.height;
    let mut lf = Vec::with_capacity(regions.len());
    let mut hf = Vec::with_capacity(regions.len());
    for r in regions {
        let o = &spec.objects[r.segment_id];
        lf.push(lf_caption(o, r.area, canvas));
        hf.push(hf_caption(o.texture));
    }
    CaptionSet {
        global: global_caption(spec),
        lf,
        hf,
    }
}

/// The `k` largest regions by area, ties broken by lower segment id.
pub fn select_top_segments(regions: &[SegmentRegion], k: usize) -> Vec<SegmentRegion> {
    let mut sorted: Vec<&SegmentRegion> = regions.iter().collect();
    sorted.sort_by(|a, b| b.area.cmp(&a.area).then(a.segment_id.cmp(&b.segment_id)));
    sorted.into_iter().take(k).cloned().collect()
}

/// Per-object sentence that merges both frequency bands.
pub fn mixed_captions(captions: &CaptionSet) -> Vec<String> {
    captions
        .lf
        .iter()
        .zip(&captions.hf)
        .map(|(lf, hf)| format!("{lf} with a {hf}"))
        .collect()
}

/// Replaces each whitespace token with [`CORRUPTION_TOKEN`] with probability `p`.
///
/// One uniform draw per token from a ChaCha8 generator seeded with `seed`, in
/// the order global, then each LF caption, then each HF caption. A caption in
/// which nothing was replaced is returned unchanged; otherwise its tokens are
/// re-joined with single spaces.
pub fn corrupt_captions(captions: &CaptionSet, p: f64, seed: u64) -> CaptionSet {
    let mut rng = keyed_rng(seed, 0);
    let mut corrupt = |text: &str| {
        let mut changed = false;
        let tokens: Vec<&str> = text
            .split_whitespace()
            .map(|tok| {
                let u: f64 = rng.random();
                if u < p {
                    changed = true;
                    CORRUPTION_TOKEN
                } else {
                    tok
                }
            })
            .collect();
        if changed {
            tokens.join(" ")
        } else {
            text.to_string()
        }
    };
    let global = corrupt(&captions.global);
    let lf = captions.lf.iter().map(|c| corrupt(c)).collect();
    let hf = captions.hf.iter().map(|c| corrupt(c)).collect();
    CaptionSet { global, lf, hf }
}
