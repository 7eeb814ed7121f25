//! Synthetic training records: scenes, captions, degradations and the
//! JSONL manifest that ties them together.

pub mod caption;
pub mod degrade;
pub mod scene;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use caption::{caption_scene, corrupt_captions, mixed_captions, select_top_segments};
pub use degrade::{degrade, DegradationParams, DegradationRanges};
pub use scene::{generate_scene, SceneSpec, SegmentRegion};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::prior::CaptionSet;
use crate::rng::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;
pub const GENERATOR: &str = concat!("dtpsr-synth/", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MAX_SEGMENTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub record_id: String,
    /// Relative to the manifest's directory.
    pub hr_path: String,
    pub lr_path: String,
    pub global: String,
    pub lf: Vec<String>,
    pub hf: Vec<String>,
    pub areas: Vec<usize>,
    pub degradation: DegradationParams,
    pub seed: u64,
    pub schema_version: u32,
    pub generator: String,
}

impl AnnotationRecord {
    pub fn captions(&self) -> CaptionSet {
        CaptionSet {
            global: self.global.clone(),
            lf: self.lf.clone(),
            hf: self.hf.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Schema(format!("record '{}': {msg}", self.record_id)));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.record_id.is_empty() || self.hr_path.is_empty() || self.lr_path.is_empty() {
            return fail("empty id or path".into());
        }
        if self.lf.len() != self.hf.len() || self.lf.len() != self.areas.len() {
            return fail(format!(
                "{} lf, {} hf and {} areas",
                self.lf.len(),
                self.hf.len(),
                self.areas.len()
            ));
        }
        if self.lf.len() > MAX_SEGMENTS {
            return fail(format!("{} segments (max {MAX_SEGMENTS})", self.lf.len()));
        }
        if self.areas.windows(2).any(|w| w[0] < w[1]) {
            return fail("areas not in descending order".into());
        }
        self.degradation
            .validate()
            .or_else(|e| fail(format!("degradation: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub top_k: usize,
    pub degradation: DegradationRanges,
    /// Word-corruption probability applied to captions at build time.
    pub corrupt_p: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            image_size: 64,
            min_objects: 1,
            max_objects: 5,
            top_k: MAX_SEGMENTS,
            degradation: DegradationRanges::default(),
            corrupt_p: 0.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config("dataset.image_size must be >= 16"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config(
                "dataset.min_objects exceeds dataset.max_objects",
            ));
        }
        if !(1..=MAX_SEGMENTS).contains(&self.top_k) {
            return Err(Error::config(format!(
                "dataset.top_k must be in 1..={MAX_SEGMENTS}"
            )));
        }
        if !(0.0..=1.0).contains(&self.corrupt_p) {
            return Err(Error::config("dataset.corrupt_p must be in [0, 1]"));
        }
        self.degradation.validate()?;
        if self.image_size % self.degradation.downscale_factor != 0 {
            return Err(Error::config(
                "degradation.downscale_factor must divide dataset.image_size",
            ));
        }
        Ok(())
    }

    pub fn record_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }
}

/// One generated sample before it is written to disk.
#[derive(Clone, Debug)]
pub struct GeneratedRecord {
    pub spec: SceneSpec,
    pub hr: RgbImage,
    pub lr: RgbImage,
    pub regions: Vec<SegmentRegion>,
    pub captions: CaptionSet,
    pub degradation: DegradationParams,
    pub seed: u64,
}

/// Generates one synthetic sample from its seed.
pub fn generate_record(config: &DatasetConfig, seed: u64) -> Result<GeneratedRecord> {
    let spec = SceneSpec::random(
        config.image_size,
        config.min_objects,
        config.max_objects,
        seed,
    )?;
    let (hr, regions) = generate_scene(&spec)?;
    let top = select_top_segments(&regions, config.top_k);
    let mut captions = caption_scene(&spec, &top);
    if config.corrupt_p > 0.0 {
        captions = corrupt_captions(&captions, config.corrupt_p, derive_seed(seed, 2));
    }
    let degradation = config.degradation.sample(derive_seed(seed, 1));
    let lr = degrade(&hr, &degradation, seed)?;
    Ok(GeneratedRecord {
        spec,
        hr,
        lr,
        regions: top,
        captions,
        degradation,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildSummary {
    pub manifest: PathBuf,
    pub written: usize,
    pub skipped: usize,
}

/// Writes `count` records under `out_dir` and their manifest.
///
/// Records that fail schema validation are skipped and counted; I/O errors
/// abort the build.
pub fn build_dataset(count: usize, out_dir: &Path, config: &DatasetConfig) -> Result<BuildSummary> {
    config.validate()?;
    for sub in ["hr", "lr"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let results: Vec<Result<Option<AnnotationRecord>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = config.record_seed(i);
            let g = generate_record(config, seed)?;
            let record_id = format!("rec-{i:06}");
            let record = AnnotationRecord {
                hr_path: format!("hr/{record_id}.png"),
                lr_path: format!("lr/{record_id}.png"),
                record_id,
                global: g.captions.global,
                lf: g.captions.lf,
                hf: g.captions.hf,
                areas: g.regions.iter().map(|r| r.area).collect(),
                degradation: g.degradation,
                seed,
                schema_version: SCHEMA_VERSION,
                generator: GENERATOR.to_string(),
            };
            if let Err(e) = record.validate() {
                log::warn!("skipping record: {e}");
                return Ok(None);
            }
            g.hr.save_png(&out_dir.join(&record.hr_path))?;
            g.lr.save_png(&out_dir.join(&record.lr_path))?;
            Ok(Some(record))
        })
        .collect();
    let manifest = out_dir.join(MANIFEST_FILE);
    let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    let (mut written, mut skipped) = (0, 0);
    for r in results {
        match r? {
            Some(record) => {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(out, "{line}").map_err(|e| Error::io(&manifest, e))?;
                written += 1;
            }
            None => skipped += 1,
        }
    }
    out.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(BuildSummary {
        manifest,
        written,
        skipped,
    })
}

/// Parses and validates every line of a manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// A manifest record with its images loaded.
#[derive(Clone, Debug)]
pub struct LoadedRecord {
    pub record: AnnotationRecord,
    pub hr: RgbImage,
    pub lr: RgbImage,
}

pub fn load_records(manifest: &Path) -> Result<Vec<LoadedRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    load_manifest(manifest)?
        .into_iter()
        .map(|record| {
            let hr = RgbImage::load_png(&base.join(&record.hr_path))?;
            let lr = RgbImage::load_png(&base.join(&record.lr_path))?;
            Ok(LoadedRecord { record, hr, lr })
        })
        .collect()
}

/// Turns an LR image into a caption set, as a segmenter plus captioner would.
pub trait Annotator: Sync {
    fn annotate(&self, lr: &RgbImage) -> Result<CaptionSet>;
}

/// Answers from the ground-truth scene the image was rendered from.
pub struct SyntheticAnnotator {
    pub spec: SceneSpec,
    pub top_k: usize,
}

impl Annotator for SyntheticAnnotator {
    fn annotate(&self, _lr: &RgbImage) -> Result<CaptionSet> {
        let (_, regions) = generate_scene(&self.spec)?;
        Ok(caption_scene(
            &self.spec,
            &select_top_segments(&regions, self.top_k),
        ))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationReplay {
    /// [`RgbImage::content_hash`] of the LR image.
    pub image: String,
    pub captions: CaptionSet,
}

/// Serves caption sets recorded from an external segmenter and captioner.
pub struct ReplayAnnotator {
    entries: HashMap<String, CaptionSet>,
}

impl ReplayAnnotator {
    pub fn from_entries(entries: impl IntoIterator<Item = AnnotationReplay>) -> Result<Self> {
        let mut map = HashMap::new();
        for e in entries {
            e.captions.validate()?;
            map.insert(e.image, e.captions);
        }
        Ok(ReplayAnnotator { entries: map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<AnnotationReplay>>>()?;
        Self::from_entries(entries)
    }
}

impl Annotator for ReplayAnnotator {
    fn annotate(&self, lr: &RgbImage) -> Result<CaptionSet> {
        let key = lr.content_hash();
        self.entries.get(&key).cloned().ok_or(Error::MissingReplay {
            kind: "annotation".into(),
            key,
        })
    }
}
