//! JSON checkpoints: the config a model was built with, its parameters and
//! the optimizer state needed to resume training.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imaging::sha256_hex;
use crate::nn::{AdamW, ParamStore};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    /// Optimizer steps taken so far.
    pub iteration: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// Short content hash of the parameters.
    pub fn id(&self) -> String {
        let bytes = serde_json::to_vec(&self.params).expect("params serialize");
        sha256_hex(&bytes)[..16].to_string()
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint format {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        if !ckpt.params.all_finite() {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(ckpt)
    }

    /// The training-time config with runtime settings (guidance, sampling,
    /// evaluation) taken from `runtime`.
    pub fn runtime_config(&self, runtime: &RunConfig) -> RunConfig {
        let mut c = self.config.clone();
        c.guidance = runtime.guidance.clone();
        c.eval = runtime.eval.clone();
        c.diffusion.sampling_steps = runtime.diffusion.sampling_steps;
        c.diffusion.variance = runtime.diffusion.variance;
        c
    }
}
