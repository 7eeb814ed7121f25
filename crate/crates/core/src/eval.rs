//! Evaluation harness: per-image fidelity metrics, ablation grids and the
//! caption-robustness protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{corrupt_captions, mixed_captions, LoadedRecord};
use crate::denoiser::{Branch, DenoiserConfig};
use crate::error::{Error, Result};
use crate::guidance::CfgMode;
use crate::metrics::{psnr, ssim, Psnr};
use crate::model::SrModel;
use crate::prior::{CaptionSet, Embeddings, PriorBundle};
use crate::rng::derive_seed;

pub const GRIDS: [&str; 5] = ["table3", "table4", "table5", "table6", "robustness"];
pub const ROBUSTNESS_DELTA_FILE: &str = "robustness_delta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageScore {
    pub record_id: String,
    pub psnr_db: Psnr,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMeta {
    pub name: String,
    pub description: String,
    pub checkpoint_id: String,
    pub cfg_mode: CfgMode,
    pub lambda_s: f64,
    pub branches: BTreeMap<Branch, bool>,
    pub mixed_frequency_mode: bool,
    pub corruption_p: f64,
    pub seed: u64,
    pub sampling_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub images: Vec<ImageScore>,
    /// Infinite when any image is reproduced exactly.
    pub mean_psnr_db: Psnr,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_scores(meta: ReportMeta, images: Vec<ImageScore>) -> Self {
        let n = images.len().max(1) as f64;
        MetricReport {
            meta,
            mean_psnr_db: Psnr(images.iter().map(|s| s.psnr_db.0).sum::<f64>() / n),
            mean_ssim: images.iter().map(|s| s.ssim).sum::<f64>() / n,
            images,
        }
    }
}

/// One configuration of an ablation grid, applied on top of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub name: String,
    pub description: String,
    pub gtca: bool,
    pub lfca: bool,
    pub hfca: bool,
    pub lrca: bool,
    pub mixed: bool,
    /// Guidance mode; the runtime config's when `None`.
    pub cfg_mode: Option<CfgMode>,
    pub corruption_p: f64,
}

impl Experiment {
    fn full(name: &str, description: &str) -> Self {
        Experiment {
            name: name.into(),
            description: description.into(),
            gtca: true,
            lfca: true,
            hfca: true,
            lrca: true,
            mixed: false,
            cfg_mode: None,
            corruption_p: 0.0,
        }
    }
}

/// The configurations of a named grid, in report order.
pub fn grid(name: &str, corruption_p: f64) -> Result<Vec<Experiment>> {
    let full = Experiment::full;
    let exps = match name {
        "table3" => vec![
            Experiment {
                gtca: false,
                lfca: false,
                hfca: false,
                ..full("exp3-1", "no text priors")
            },
            Experiment {
                gtca: false,
                ..full("exp3-2", "local priors only")
            },
            Experiment {
                lfca: false,
                hfca: false,
                ..full("exp3-3", "global prior only")
            },
            full("exp3-4", "global and local priors"),
        ],
        "table4" => vec![
            Experiment {
                hfca: false,
                ..full("exp4-1", "low-frequency prior only")
            },
            Experiment {
                lfca: false,
                ..full("exp4-2", "high-frequency prior only")
            },
            full("exp4-3", "both frequency priors"),
        ],
        "table5" => vec![
            Experiment {
                mixed: true,
                ..full("exp5-1", "mixed frequency captions")
            },
            full("exp5-2", "disentangled frequency captions"),
        ],
        "table6" => [
            ("none", CfgMode::None),
            ("single", CfgMode::Single),
            ("multi", CfgMode::Multi),
        ]
        .into_iter()
        .map(|(n, m)| Experiment {
            cfg_mode: Some(m),
            ..full(n, &format!("{n} classifier-free guidance"))
        })
        .collect(),
        "robustness" => vec![
            full("dtpsr", "clean captions"),
            Experiment {
                corruption_p,
                ..full("dtpsr-c", "corrupted captions")
            },
        ],
        other => {
            return Err(Error::config(format!(
                "unknown grid '{other}' (expected one of {})",
                GRIDS.join(", ")
            )))
        }
    };
    Ok(exps)
}

fn experiment_denoiser(base: &DenoiserConfig, e: &Experiment) -> DenoiserConfig {
    let mut c = base.clone();
    c.set_branch(Branch::Gtca, e.gtca);
    c.set_branch(Branch::Lfca, e.lfca);
    c.set_branch(Branch::Hfca, e.hfca);
    c.set_branch(Branch::Lrca, e.lrca);
    c.mixed_frequency_mode = e.mixed;
    c
}

/// Priors for the mixed layout: one merged sentence per object, all in the
/// LF rows.
fn mixed_priors(model: &SrModel, captions: &CaptionSet) -> Result<PriorBundle> {
    let merged = mixed_captions(captions);
    let mut bundle = model.encode_captions(&CaptionSet {
        global: captions.global.clone(),
        lf: merged.clone(),
        hf: merged,
    })?;
    bundle.hf = Embeddings::empty(bundle.hf.dim());
    Ok(bundle)
}

/// Restores every record under one experiment. Record `i` uses sample seed
/// `derive_seed(seed, i)` and corruption seed `derive_seed(seed ^ 1, i)`, so
/// all experiments of a grid see identical noise.
pub fn evaluate(
    model: &SrModel,
    records: &[LoadedRecord],
    experiment: &Experiment,
    checkpoint_id: &str,
) -> Result<MetricReport> {
    let seed = model.config.eval.seed;
    let mut guidance_spec = model.config.guidance.clone();
    if let Some(mode) = experiment.cfg_mode {
        guidance_spec.mode = mode;
    }
    let variant = model.variant(
        experiment_denoiser(&model.config.denoiser, experiment),
        guidance_spec,
    )?;
    let guidance = variant.guidance()?;
    let images = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut captions = r.record.captions();
            if experiment.corruption_p > 0.0 {
                captions = corrupt_captions(
                    &captions,
                    experiment.corruption_p,
                    derive_seed(seed ^ 1, i as u64),
                );
            }
            let priors = if experiment.mixed {
                mixed_priors(&variant, &captions)?
            } else {
                variant.encode_captions(&captions)?
            };
            let prepared = variant.prepare_with_priors(&r.lr, priors)?;
            let out = variant.restore(&prepared, &guidance, derive_seed(seed, i as u64))?;
            Ok(ImageScore {
                record_id: r.record.record_id.clone(),
                psnr_db: psnr(&r.hr, &out)?,
                ssim: ssim(&r.hr, &out)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dc = variant.denoiser.config();
    let meta = ReportMeta {
        name: experiment.name.clone(),
        description: experiment.description.clone(),
        checkpoint_id: checkpoint_id.to_string(),
        cfg_mode: variant.config.guidance.mode,
        lambda_s: variant.config.guidance.lambda_s,
        branches: Branch::ALL
            .iter()
            .map(|&b| (b, dc.branch_enabled(b)))
            .collect(),
        mixed_frequency_mode: dc.mixed_frequency_mode,
        corruption_p: experiment.corruption_p,
        seed,
        sampling_steps: variant.config.diffusion.sampling_steps,
    };
    Ok(MetricReport::from_scores(meta, images))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessDelta {
    pub clean: String,
    pub corrupted: String,
    pub corruption_p: f64,
    pub psnr_drop_db: f64,
    pub ssim_drop: f64,
}

impl RobustnessDelta {
    pub fn between(clean: &MetricReport, corrupted: &MetricReport) -> Self {
        RobustnessDelta {
            clean: clean.meta.name.clone(),
            corrupted: corrupted.meta.name.clone(),
            corruption_p: corrupted.meta.corruption_p,
            psnr_drop_db: clean.mean_psnr_db.0 - corrupted.mean_psnr_db.0,
            ssim_drop: clean.mean_ssim - corrupted.mean_ssim,
        }
    }
}

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(
        "name,description,cfg_mode,gtca,lfca,hfca,lrca,mixed,corruption_p,mean_psnr_db,mean_ssim\n",
    );
    for r in reports {
        let m = &r.meta;
        let b = |x: Branch| m.branches.get(&x).copied().unwrap_or(false);
        let mode = serde_json::to_value(m.cfg_mode).expect("mode");
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.name,
            m.description,
            mode.as_str().unwrap_or_default(),
            b(Branch::Gtca),
            b(Branch::Lfca),
            b(Branch::Hfca),
            b(Branch::Lrca),
            m.mixed_frequency_mode,
            m.corruption_p,
            r.mean_psnr_db,
            r.mean_ssim
        )
        .expect("string write");
    }
    out
}

pub fn write_reports(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r).expect("report serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Runs every experiment of `grid_name` and writes `{grid}.jsonl` and
/// `{grid}.csv` to `out_dir`; the robustness grid also writes the paired delta.
pub fn run_ablation(
    model: &SrModel,
    records: &[LoadedRecord],
    grid_name: &str,
    checkpoint_id: &str,
    out_dir: &Path,
) -> Result<Vec<MetricReport>> {
    let experiments = grid(grid_name, model.config.eval.corruption_p)?;
    let reports = experiments
        .iter()
        .map(|e| {
            log::info!("{grid_name}: {}", e.name);
            evaluate(model, records, e, checkpoint_id)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_reports(&reports, &out_dir.join(format!("{grid_name}.jsonl")))?;
    let csv = out_dir.join(format!("{grid_name}.csv"));
    fs::write(&csv, reports_to_csv(&reports)).map_err(|e| Error::io(&csv, e))?;
    if grid_name == "robustness" {
        let delta = RobustnessDelta::between(&reports[0], &reports[1]);
        let path = out_dir.join(ROBUSTNESS_DELTA_FILE);
        fs::write(&path, serde_json::to_string_pretty(&delta).expect("delta"))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(reports)
}
