//! Run configuration: one TOML document with a section per module.
//!
//! Layers are applied in the order defaults, file, environment, command
//! line; later layers win. Every layer goes through the same dotted-key
//! override path, and the merged document is deserialized with unknown keys
//! rejected, then validated as a whole before any work starts.
//!
//! Environment overrides use `DTPSR_<SECTION>_<FIELD>`, for example
//! `DTPSR_TRAIN_ITERATIONS=50`. `DTPSR_CONFIG` names the default config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{NoiseSchedule, PosteriorVariance};
use crate::error::{Error, Result};
use crate::guidance::GuidanceSpec;
use crate::latent::DEFAULT_LATENT_SCALE;
use crate::prior::TextGranularity;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const CONFIG_ENV: &str = "DTPSR_CONFIG";
const ENV_PREFIX: &str = "DTPSR_";
const SECTIONS: [&str; 7] = [
    "diffusion",
    "denoiser",
    "priors",
    "guidance",
    "dataset",
    "eval",
    "train",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
    pub variance: PosteriorVariance,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampling_steps: 50,
            variance: PosteriorVariance::Posterior,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.sampling_steps == 0 || self.sampling_steps > self.num_steps {
            return Err(Error::config(format!(
                "diffusion.sampling_steps must be in 1..={}",
                self.num_steps
            )));
        }
        Ok(())
    }
}

/// Encoders that turn images and captions into denoiser inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub granularity: TextGranularity,
    /// DCT block size of the latent codec; the latent has `3 · factor²` channels.
    pub latent_factor: usize,
    pub latent_scale: f64,
    /// Patch size of the LR feature tokenizer, in LR pixels.
    pub lr_patch: usize,
    pub tokenizer_seed: u64,
    /// Serve text embeddings from a replay file instead of the hash encoder.
    pub text_replay: Option<PathBuf>,
    /// Serve LR tokens from a replay file instead of the patch tokenizer.
    pub image_replay: Option<PathBuf>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            granularity: TextGranularity::Pooled,
            latent_factor: 4,
            latent_scale: DEFAULT_LATENT_SCALE,
            lr_patch: 4,
            tokenizer_seed: 0,
            text_replay: None,
            image_replay: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    /// Evaluate at most this many manifest records (all when unset).
    pub limit: Option<usize>,
    /// Caption corruption used for the corrupted half of the robustness grid.
    pub corruption_p: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            limit: None,
            corruption_p: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Probability of replacing an example's captions with empty ones.
    pub caption_dropout: f64,
    pub checkpoint_every: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 2e-3,
            iterations: 2000,
            seed: 0,
            caption_dropout: 0.1,
            checkpoint_every: 500,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub priors: PriorConfig,
    pub guidance: GuidanceSpec,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            priors: PriorConfig::default(),
            guidance: GuidanceSpec::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.diffusion.validate()?;
        self.denoiser.validate()?;
        self.guidance.validate()?;
        self.dataset.validate()?;
        let p = &self.priors;
        if p.latent_factor == 0 || self.dataset.image_size % p.latent_factor != 0 {
            return Err(Error::config(
                "priors.latent_factor must divide dataset.image_size",
            ));
        }
        if (self.dataset.image_size / p.latent_factor) % 2 != 0 {
            return Err(Error::config(
                "latent side (image_size / latent_factor) must be even",
            ));
        }
        if self.denoiser.latent_channels != 3 * p.latent_factor * p.latent_factor {
            return Err(Error::config(format!(
                "denoiser.latent_channels must be 3 * latent_factor^2 = {}",
                3 * p.latent_factor * p.latent_factor
            )));
        }
        if !(p.latent_scale.is_finite() && p.latent_scale > 0.0) {
            return Err(Error::config("priors.latent_scale must be positive"));
        }
        let lr_side = self.dataset.image_size / self.dataset.degradation.downscale_factor;
        if p.lr_patch == 0 || lr_side % p.lr_patch != 0 {
            return Err(Error::config(format!(
                "priors.lr_patch must divide the LR side {lr_side}"
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.corruption_p) {
            return Err(Error::config("eval.corruption_p must be in [0, 1]"));
        }
        if self.eval.limit == Some(0) {
            return Err(Error::config("eval.limit must be positive when set"));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&t.caption_dropout) {
            return Err(Error::config("train.caption_dropout must be in [0, 1]"));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay must be >= 0"));
        }
        if t.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }
}

/// Builds a validated config from the layered sources.
#[derive(Clone, Debug, Default)]
pub struct ConfigLoader {
    pub file: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    /// `section.field=value` pairs from the command line.
    pub overrides: Vec<String>,
}

impl ConfigLoader {
    /// Captures the process environment: `DTPSR_CONFIG` and any
    /// `DTPSR_<SECTION>_<FIELD>` variables.
    pub fn from_env() -> Self {
        let env: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        let file = env
            .iter()
            .find(|(k, _)| k == CONFIG_ENV)
            .map(|(_, v)| PathBuf::from(v));
        ConfigLoader {
            file,
            env,
            overrides: Vec::new(),
        }
    }

    pub fn load(&self) -> Result<RunConfig> {
        let mut doc = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = &self.file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Value = text
                .parse::<toml::Table>()
                .map(toml::Value::Table)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, file);
        }
        for (key, value) in &self.env {
            if key == CONFIG_ENV {
                continue;
            }
            let dotted = env_key(key)?;
            set_dotted(&mut doc, &dotted, value)?;
        }
        for spec in &self.overrides {
            let (key, value) = spec
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{spec}' is not key=value")))?;
            set_dotted(&mut doc, key.trim(), value.trim())?;
        }
        let config: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// `DTPSR_TRAIN_BATCH_SIZE` -> `train.batch_size`.
fn env_key(var: &str) -> Result<String> {
    let rest = var[ENV_PREFIX.len()..].to_ascii_lowercase();
    let (section, field) = rest.split_once('_').ok_or_else(|| {
        Error::config(format!("environment variable {var} does not name a field"))
    })?;
    if !SECTIONS.contains(&section) || field.is_empty() {
        return Err(Error::config(format!(
            "environment variable {var} does not name a config field"
        )));
    }
    Ok(format!("{section}.{field}"))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a value as a TOML literal, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn set_dotted(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("invalid config key '{key}'")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("'{key}' does not name a config field")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("'{key}' does not name a config field")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

pub fn load_file(path: &Path) -> Result<RunConfig> {
    ConfigLoader {
        file: Some(path.to_path_buf()),
        ..ConfigLoader::default()
    }
    .load()
}
