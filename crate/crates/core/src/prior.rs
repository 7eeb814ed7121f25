//! Caption and low-resolution-image encoders.
//!
//! Captions become a [`PriorBundle`]: one global embedding plus one row per
//! segment for the low-frequency and high-frequency descriptions. The LR
//! image becomes a [`LrFeatureTokens`] matrix. Both encoders sit behind
//! traits; the reference implementations are deterministic toys, and replay
//! adapters serve precomputed embeddings from a file.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{sha256_hex, RgbImage};
use crate::rng::{normal_vec, splitmix64};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub global: String,
    pub lf: Vec<String>,
    pub hf: Vec<String>,
}

impl CaptionSet {
    pub fn segment_count(&self) -> usize {
        self.lf.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lf.len() != self.hf.len() {
            return Err(Error::Schema(format!(
                "{} low-frequency captions but {} high-frequency captions",
                self.lf.len(),
                self.hf.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Global,
    Lf,
    Hf,
    Image,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Global => "global",
            PriorKind::Lf => "lf",
            PriorKind::Hf => "hf",
            PriorKind::Image => "image",
        }
    }
}

/// How each caption is turned into embedding rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextGranularity {
    /// One pooled vector per caption.
    #[default]
    Pooled,
    /// One vector per whitespace token.
    Tokens,
}

/// `n x dim` embedding rows with a validity mask. Masked rows are all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    dim: usize,
    rows: Vec<f64>,
    mask: Vec<bool>,
}

impl Embeddings {
    pub fn empty(dim: usize) -> Self {
        Embeddings {
            dim,
            rows: Vec::new(),
            mask: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut e = Embeddings::empty(dim);
        for r in rows {
            e.push(r, true)?;
        }
        Ok(e)
    }

    pub fn push(&mut self, row: Vec<f64>, valid: bool) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::shape("Embeddings::push", &[self.dim], &[row.len()]));
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding row"));
        }
        if valid {
            self.rows.extend(row);
        } else {
            self.rows.extend(std::iter::repeat_n(0.0, self.dim));
        }
        self.mask.push(valid);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.rows
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn any_valid(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    /// Appends masked zero rows until there are `n` rows.
    pub fn pad_to(&mut self, n: usize) {
        while self.len() < n {
            self.rows.extend(std::iter::repeat_n(0.0, self.dim));
            self.mask.push(false);
        }
    }

    /// Row-wise concatenation `[self; other]`.
    pub fn concat(&self, other: &Embeddings) -> Result<Embeddings> {
        if self.dim != other.dim {
            return Err(Error::shape(
                "Embeddings::concat",
                &[self.dim],
                &[other.dim],
            ));
        }
        let mut rows = self.rows.clone();
        rows.extend_from_slice(&other.rows);
        let mut mask = self.mask.clone();
        mask.extend_from_slice(&other.mask);
        Ok(Embeddings {
            dim: self.dim,
            rows,
            mask,
        })
    }
}

/// Encoded textual priors for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBundle {
    pub global: Embeddings,
    pub lf: Embeddings,
    pub hf: Embeddings,
}

impl PriorBundle {
    /// A bundle with no textual conditioning at all.
    pub fn empty(dim: usize) -> Self {
        PriorBundle {
            global: Embeddings::empty(dim),
            lf: Embeddings::empty(dim),
            hf: Embeddings::empty(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.global.dim()
    }

    /// The pooled global vector, or `None` when the global slot is empty.
    pub fn global_vector(&self) -> Option<&[f64]> {
        (!self.global.is_empty()).then(|| self.global.row(0))
    }

    pub fn pad_local_to(&mut self, n: usize) {
        self.lf.pad_to(n);
        self.hf.pad_to(n);
    }
}

/// `m x dim` feature tokens extracted from the LR image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrFeatureTokens {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LrFeatureTokens {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(
                "LrFeatureTokens::new",
                &[rows, dim],
                &[data.len()],
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("LR feature tokens"));
        }
        Ok(LrFeatureTokens { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Pooled embedding of one caption.
    fn encode(&self, text: &str, kind: PriorKind) -> Result<Vec<f64>>;

    /// One embedding per token. Encoders without token access reject this.
    fn encode_tokens(&self, _text: &str, _kind: PriorKind) -> Result<Vec<Vec<f64>>> {
        Err(Error::config(
            "this text encoder does not provide token-level embeddings",
        ))
    }
}

pub trait ImageFeatureEncoder: Send + Sync {
    fn token_count(&self) -> usize;
    fn token_dim(&self) -> usize;
    fn encode(&self, img: &RgbImage) -> Result<LrFeatureTokens>;
}

/// Toy text encoder: bag-of-tokens sign hashing.
///
/// Tokens are the whitespace-separated pieces of the lowercased caption;
/// punctuation stays attached, so `"circle."` and `"circle"` are different
/// tokens. A token `w` maps to the vector `s(w) in {-1, +1}^dim` where, with
/// `state = fnv1a64(w)`, component `k` is `+1` iff the `k`-th SplitMix64
/// output from `state` has its top bit clear. The caption embedding is
/// `sum_w s(w)` over all tokens (with repetition), L2-normalized. A caption
/// without tokens embeds to the zero vector.
#[derive(Clone, Debug)]
pub struct HashTextEncoder {
    dim: usize,
}

pub const DEFAULT_TEXT_DIM: usize = 64;

impl HashTextEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("text embedding dimension must be positive"));
        }
        Ok(HashTextEncoder { dim })
    }

    fn token_signs(&self, token: &str) -> Vec<f64> {
        let mut state = fnv1a64(token.as_bytes());
        (0..self.dim)
            .map(|_| {
                if splitmix64(&mut state) >> 63 == 0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect()
    }
}

impl Default for HashTextEncoder {
    fn default() -> Self {
        HashTextEncoder {
            dim: DEFAULT_TEXT_DIM,
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str, _kind: PriorKind) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        for token in text.to_lowercase().split_whitespace() {
            for (a, s) in acc.iter_mut().zip(self.token_signs(token)) {
                *a += s;
            }
        }
        Ok(normalized(acc))
    }

    fn encode_tokens(&self, text: &str, _kind: PriorKind) -> Result<Vec<Vec<f64>>> {
        Ok(text
            .to_lowercase()
            .split_whitespace()
            .map(|t| normalized(self.token_signs(t)))
            .collect())
    }
}

/// Encodes the global caption. Blank captions map to the zero vector
/// without consulting the encoder.
pub fn encode_global(text: &str, encoder: &dyn TextEncoder) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Ok(vec![0.0; encoder.dim()]);
    }
    let v = encoder.encode(text, PriorKind::Global)?;
    check_vector(&v, encoder.dim())?;
    Ok(v)
}

fn check_vector(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::shape("text encoder output", &[dim], &[v.len()]));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("text encoder output"));
    }
    Ok(())
}

fn encode_list(
    captions: &[String],
    kind: PriorKind,
    encoder: &dyn TextEncoder,
) -> Result<Embeddings> {
    let mut out = Embeddings::empty(encoder.dim());
    for c in captions {
        let v = if c.trim().is_empty() {
            vec![0.0; encoder.dim()]
        } else {
            let v = encoder.encode(c, kind)?;
            check_vector(&v, encoder.dim())?;
            v
        };
        out.push(v, true)?;
    }
    Ok(out)
}

/// One row per low-frequency caption.
pub fn encode_lf(captions: &[String], encoder: &dyn TextEncoder) -> Result<Embeddings> {
    encode_list(captions, PriorKind::Lf, encoder)
}

/// One row per high-frequency caption.
pub fn encode_hf(captions: &[String], encoder: &dyn TextEncoder) -> Result<Embeddings> {
    encode_list(captions, PriorKind::Hf, encoder)
}

pub(crate) fn encode_token_rows(
    captions: &[&str],
    kind: PriorKind,
    encoder: &dyn TextEncoder,
) -> Result<Embeddings> {
    let mut out = Embeddings::empty(encoder.dim());
    for c in captions {
        for v in encoder.encode_tokens(c, kind)? {
            check_vector(&v, encoder.dim())?;
            out.push(v, true)?;
        }
    }
    Ok(out)
}

/// Encodes a full caption set. In pooled mode a blank global caption yields
/// a single masked row, which the global branch treats as absent.
pub fn encode_priors(
    captions: &CaptionSet,
    encoder: &dyn TextEncoder,
    granularity: TextGranularity,
) -> Result<PriorBundle> {
    captions.validate()?;
    match granularity {
        TextGranularity::Pooled => {
            let mut global = Embeddings::empty(encoder.dim());
            let blank = captions.global.trim().is_empty();
            global.push(encode_global(&captions.global, encoder)?, !blank)?;
            Ok(PriorBundle {
                global,
                lf: encode_lf(&captions.lf, encoder)?,
                hf: encode_hf(&captions.hf, encoder)?,
            })
        }
        TextGranularity::Tokens => {
            let lf: Vec<&str> = captions.lf.iter().map(String::as_str).collect();
            let hf: Vec<&str> = captions.hf.iter().map(String::as_str).collect();
            Ok(PriorBundle {
                global: encode_token_rows(&[captions.global.as_str()], PriorKind::Global, encoder)?,
                lf: encode_token_rows(&lf, PriorKind::Lf, encoder)?,
                hf: encode_token_rows(&hf, PriorKind::Hf, encoder)?,
            })
        }
    }
}

/// Toy LR feature extractor: a fixed-weight stride-`patch` convolution.
///
/// Pixels are scaled to `[0, 1]`. Token `i` is patch `i` in row-major order;
/// its features are `W p + b` where `p` is the patch flattened as
/// `(channel, y, x)`. Weights are `N(0, 1/fan_in)` draws from stream
/// `(seed, 0)`; the bias is zero unless set explicitly.
#[derive(Clone, Debug)]
pub struct PatchTokenizer {
    image_size: usize,
    patch: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl PatchTokenizer {
    pub fn new(image_size: usize, patch: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || image_size == 0 || image_size % patch != 0 {
            return Err(Error::config(format!(
                "patch size {patch} must divide LR image size {image_size}"
            )));
        }
        if dim == 0 {
            return Err(Error::config("LR token dimension must be positive"));
        }
        let fan_in = 3 * patch * patch;
        let std = 1.0 / (fan_in as f64).sqrt();
        let weights = normal_vec(seed, 0, dim * fan_in)
            .into_iter()
            .map(|v| v * std)
            .collect();
        Ok(PatchTokenizer {
            image_size,
            patch,
            dim,
            weights,
            bias: vec![0.0; dim],
        })
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.dim {
            return Err(Error::shape(
                "PatchTokenizer::with_bias",
                &[self.dim],
                &[bias.len()],
            ));
        }
        self.bias = bias;
        Ok(self)
    }
}

impl ImageFeatureEncoder for PatchTokenizer {
    fn token_count(&self) -> usize {
        let per_side = self.image_size / self.patch;
        per_side * per_side
    }

    fn token_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, img: &RgbImage) -> Result<LrFeatureTokens> {
        if img.width() != self.image_size || img.height() != self.image_size {
            return Err(Error::shape(
                "PatchTokenizer::encode",
                &[self.image_size, self.image_size],
                &[img.height(), img.width()],
            ));
        }
        let p = self.patch;
        let per_side = self.image_size / p;
        let fan_in = 3 * p * p;
        let mut patch = vec![0.0; fan_in];
        let mut data = Vec::with_capacity(self.token_count() * self.dim);
        for py in 0..per_side {
            for px in 0..per_side {
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            patch[(c * p + y) * p + x] = img.get(px * p + x, py * p + y, c) / 255.0;
                        }
                    }
                }
                for o in 0..self.dim {
                    let w = &self.weights[o * fan_in..(o + 1) * fan_in];
                    data.push(w.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>() + self.bias[o]);
                }
            }
        }
        LrFeatureTokens::new(self.token_count(), self.dim, data)
    }
}

/// One line of a replay-embedding file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub key_hash: String,
    pub kind: PriorKind,
    pub vector: Vec<f64>,
}

pub fn text_key(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

#[derive(Clone, Debug, Default)]
pub struct ReplayStore {
    entries: HashMap<(PriorKind, String), Vec<f64>>,
    dim: Option<usize>,
}

impl ReplayStore {
    pub fn from_records(records: impl IntoIterator<Item = ReplayRecord>) -> Result<Self> {
        let mut store = ReplayStore::default();
        for r in records {
            match store.dim {
                Some(d) if d != r.vector.len() && r.kind != PriorKind::Image => {
                    return Err(Error::shape("replay vector", &[d], &[r.vector.len()]));
                }
                None if r.kind != PriorKind::Image => store.dim = Some(r.vector.len()),
                _ => {}
            }
            store.entries.insert((r.kind, r.key_hash), r.vector);
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        ReplayStore::from_records(records)
    }

    fn lookup(&self, kind: PriorKind, key: &str) -> Result<&Vec<f64>> {
        self.entries
            .get(&(kind, key.to_string()))
            .ok_or_else(|| Error::MissingReplay {
                kind: kind.as_str().to_string(),
                key: key.to_string(),
            })
    }
}

/// Text encoder that serves recorded embeddings keyed by SHA-256 of the text.
#[derive(Clone, Debug)]
pub struct ReplayTextEncoder {
    store: ReplayStore,
    dim: usize,
}

impl ReplayTextEncoder {
    pub fn new(store: ReplayStore, dim: usize) -> Self {
        ReplayTextEncoder { store, dim }
    }
}

impl TextEncoder for ReplayTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str, kind: PriorKind) -> Result<Vec<f64>> {
        self.store.lookup(kind, &text_key(text)).cloned()
    }
}

/// Image feature encoder that serves recorded tokens keyed by image hash.
#[derive(Clone, Debug)]
pub struct ReplayImageEncoder {
    store: ReplayStore,
    rows: usize,
    dim: usize,
}

impl ReplayImageEncoder {
    pub fn new(store: ReplayStore, rows: usize, dim: usize) -> Self {
        ReplayImageEncoder { store, rows, dim }
    }
}

impl ImageFeatureEncoder for ReplayImageEncoder {
    fn token_count(&self) -> usize {
        self.rows
    }

    fn token_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, img: &RgbImage) -> Result<LrFeatureTokens> {
        let v = self.store.lookup(PriorKind::Image, &img.content_hash())?;
        LrFeatureTokens::new(self.rows, self.dim, v.clone())
    }
}

/// Wraps an encoder and records every lookup so a replay file can be written.
pub struct RecordingEncoder<'a> {
    text: &'a dyn TextEncoder,
    image: &'a dyn ImageFeatureEncoder,
    records: Mutex<Vec<ReplayRecord>>,
}

impl<'a> RecordingEncoder<'a> {
    pub fn new(text: &'a dyn TextEncoder, image: &'a dyn ImageFeatureEncoder) -> Self {
        RecordingEncoder {
            text,
            image,
            records: Mutex::new(Vec::new()),
        }
    }

    fn record(&self, rec: ReplayRecord) {
        let mut recs = self.records.lock().expect("recording lock");
        if !recs
            .iter()
            .any(|r| r.kind == rec.kind && r.key_hash == rec.key_hash)
        {
            recs.push(rec);
        }
    }

    pub fn records(&self) -> Vec<ReplayRecord> {
        self.records.lock().expect("recording lock").clone()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in self.records() {
            let line = serde_json::to_string(&r).expect("replay record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

impl TextEncoder for RecordingEncoder<'_> {
    fn dim(&self) -> usize {
        self.text.dim()
    }

    fn encode(&self, text: &str, kind: PriorKind) -> Result<Vec<f64>> {
        let v = self.text.encode(text, kind)?;
        self.record(ReplayRecord {
            key_hash: text_key(text),
            kind,
            vector: v.clone(),
        });
        Ok(v)
    }
}

impl ImageFeatureEncoder for RecordingEncoder<'_> {
    fn token_count(&self) -> usize {
        self.image.token_count()
    }

    fn token_dim(&self) -> usize {
        self.image.token_dim()
    }

    fn encode(&self, img: &RgbImage) -> Result<LrFeatureTokens> {
        let t = self.image.encode(img)?;
        self.record(ReplayRecord {
            key_hash: img.content_hash(),
            kind: PriorKind::Image,
            vector: t.data().to_vec(),
        });
        Ok(t)
    }
}
