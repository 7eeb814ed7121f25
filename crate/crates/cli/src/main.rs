use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dtpsr_core::checkpoint::Checkpoint;
use dtpsr_core::config::{ConfigLoader, RunConfig};
use dtpsr_core::dataset::{build_dataset, load_records, LoadedRecord};
use dtpsr_core::eval::{evaluate, grid, reports_to_csv, run_ablation, write_reports, Experiment};
use dtpsr_core::guidance::CfgMode;
use dtpsr_core::imaging::RgbImage;
use dtpsr_core::model::SrModel;
use dtpsr_core::pipeline::{run_demo, sample_image};
use dtpsr_core::prior::CaptionSet;
use dtpsr_core::{train, Error};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "dtpsr",
    version,
    about = "Text-prior guided diffusion super-resolution at desk scale"
)]
struct Cli {
    /// TOML config file (defaults to $DTPSR_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `section.field=value`; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for the command's randomness (dataset, training, sampling or evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(flatten)]
    guidance: GuidanceArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GuidanceArgs {
    /// none | single | multi
    #[arg(long, global = true)]
    cfg_mode: Option<CfgMode>,
    #[arg(long, global = true)]
    lambda_s: Option<f64>,
    #[arg(long, global = true)]
    neg_global: Option<String>,
    #[arg(long, global = true)]
    neg_lf: Vec<String>,
    #[arg(long, global = true)]
    neg_hf: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with captions and degraded LR images.
    BuildDataset {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Caption corruption probability applied at build time.
        #[arg(long)]
        corrupt_p: Option<f64>,
    },
    /// Train a model on a dataset manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore one LR image.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// LR image; defaults to the manifest record's LR image.
        #[arg(long)]
        lr: Option<PathBuf>,
        /// Caption set as JSON {global, lf, hf}.
        #[arg(long, conflicts_with = "record")]
        captions: Option<PathBuf>,
        #[arg(long, requires = "record")]
        manifest: Option<PathBuf>,
        /// Take captions from this manifest record.
        #[arg(long, requires = "manifest")]
        record: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest under the current config.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run a named grid instead of the single current configuration.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Run an ablation grid: table3, table4, table5, table6 or robustness.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fresh scene, automatic segmentation and captions, restoration.
    Demo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective config as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut loader = ConfigLoader::from_env();
    if cli.config.is_some() {
        loader.file = cli.config.clone();
    }
    loader.overrides = cli.overrides.clone();
    let mut cfg = loader.load()?;
    let g = &cli.guidance;
    if let Some(m) = g.cfg_mode {
        cfg.guidance.mode = m;
    }
    if let Some(l) = g.lambda_s {
        cfg.guidance.lambda_s = l;
    }
    if let Some(n) = &g.neg_global {
        cfg.guidance.neg_global = n.clone();
    }
    if !g.neg_lf.is_empty() {
        cfg.guidance.neg_lf = g.neg_lf.clone();
    }
    if !g.neg_hf.is_empty() {
        cfg.guidance.neg_hf = g.neg_hf.clone();
    }
    if let Some(s) = cli.seed {
        cfg.dataset.seed = s;
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn limited(mut records: Vec<LoadedRecord>, limit: Option<usize>) -> Vec<LoadedRecord> {
    if let Some(n) = limit {
        records.truncate(n);
    }
    records
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<(SrModel, String), Error> {
    let ckpt = Checkpoint::load(path)?;
    Ok((SrModel::from_checkpoint(&ckpt, cfg)?, ckpt.id()))
}

fn read_captions(path: &Path) -> Result<CaptionSet, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let c: CaptionSet = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    c.validate()?;
    Ok(c)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::BuildDataset {
            count,
            out,
            corrupt_p,
        } => {
            let mut dc = cfg.dataset.clone();
            if let Some(p) = corrupt_p {
                dc.corrupt_p = *p;
            }
            let s = build_dataset(*count, out, &dc)?;
            println!(
                "wrote {} records ({} skipped) to {}",
                s.written,
                s.skipped,
                s.manifest.display()
            );
        }
        Command::Train {
            manifest,
            out,
            resume,
        } => {
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let records = load_records(manifest)?;
            let path = train::train(cfg, &records, resume.as_ref(), out)?;
            println!("{}", path.display());
        }
        Command::Sample {
            checkpoint,
            lr,
            captions,
            manifest,
            record,
            out,
        } => {
            let (model, _) = load_model(checkpoint, &cfg)?;
            let from_record = match (manifest, record) {
                (Some(m), Some(id)) => Some(
                    load_records(m)?
                        .into_iter()
                        .find(|r| &r.record.record_id == id)
                        .ok_or_else(|| {
                            Error::config(format!("record '{id}' not in {}", m.display()))
                        })?,
                ),
                _ => None,
            };
            let lr_image = match (lr, &from_record) {
                (Some(p), _) => RgbImage::load_png(p)?,
                (None, Some(r)) => r.lr.clone(),
                (None, None) => {
                    return Err(Error::config("sample needs --lr or --manifest/--record"))
                }
            };
            let caps = match (captions, &from_record) {
                (Some(p), _) => read_captions(p)?,
                (None, Some(r)) => r.record.captions(),
                (None, None) => CaptionSet::default(),
            };
            let img = sample_image(&model, &lr_image, &caps, cli.seed.unwrap_or(0))?;
            img.save_png(out)?;
            println!("{}", out.display());
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
            grid: Some(g),
        } => ablate(&cfg, checkpoint, manifest, g, out)?,
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
            grid: None,
        } => {
            let (model, id) = load_model(checkpoint, &cfg)?;
            let records = limited(load_records(manifest)?, cfg.eval.limit);
            let mut exp = grid("robustness", 0.0)?.remove(0);
            exp = Experiment {
                name: "evaluation".into(),
                description: "current configuration".into(),
                ..exp
            };
            let report = evaluate(&model, &records, &exp, &id)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            write_reports(std::slice::from_ref(&report), &out.join("evaluation.jsonl"))?;
            let csv = out.join("evaluation.csv");
            std::fs::write(&csv, reports_to_csv(std::slice::from_ref(&report)))
                .map_err(|e| Error::io(&csv, e))?;
            println!(
                "{} images: PSNR {:.3} dB, SSIM {:.4}",
                report.images.len(),
                report.mean_psnr_db.0,
                report.mean_ssim
            );
        }
        Command::Ablate {
            checkpoint,
            manifest,
            grid,
            out,
        } => ablate(&cfg, checkpoint, manifest, grid, out)?,
        Command::Demo { checkpoint, out } => {
            let (model, id) = load_model(checkpoint, &cfg)?;
            let report = run_demo(&model, &id, cli.seed.unwrap_or(0), out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report"));
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn ablate(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    grid_name: &str,
    out: &Path,
) -> Result<(), Error> {
    // reject unknown grids before loading anything
    grid(grid_name, cfg.eval.corruption_p)?;
    let (model, id) = load_model(checkpoint, cfg)?;
    let records = limited(load_records(manifest)?, cfg.eval.limit);
    for r in run_ablation(&model, &records, grid_name, &id, out)? {
        println!(
            "{:<8} PSNR {:>8.3} dB  SSIM {:.4}",
            r.meta.name, r.mean_psnr_db.0, r.mean_ssim
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
