//! Training loop: deterministic batches, AdamW, loss log and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::LoadedRecord;
use crate::denoiser::TrainExample;
use crate::diffusion::{training_loss, LatentTensor};
use crate::error::{Error, Result};
use crate::model::{Prepared, SrModel};
use crate::nn::{AdamW, AdamWConfig};
use crate::prior::{CaptionSet, PriorBundle};
use crate::rng::{derive_seed, keyed_rng, normal_from};

pub const LOSS_LOG_FILE: &str = "loss.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.json";

/// A record encoded once up front: clean latent plus conditioning.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub record_id: String,
    pub z0: LatentTensor,
    pub prepared: Prepared,
}

pub fn prepare_items(model: &SrModel, records: &[LoadedRecord]) -> Result<Vec<TrainItem>> {
    records
        .par_iter()
        .map(|r| {
            Ok(TrainItem {
                record_id: r.record.record_id.clone(),
                z0: model.encode_hr(&r.hr)?,
                prepared: model.prepare(&r.lr, &r.record.captions())?,
            })
        })
        .collect()
}

/// Dataset indices for one iteration. Each epoch is a fresh permutation
/// keyed by `(seed, epoch)`, and batches run through the epochs in order.
pub fn batch_indices(seed: u64, n: usize, batch: usize, iteration: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let pos = iteration * batch as u64 + j as u64;
            let epoch = pos / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut keyed_rng(derive_seed(seed, epoch), 1));
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[(pos % n as u64) as usize]
        })
        .collect()
}

/// Timestep and noise for one example. The same `(seed, key)` always
/// gives the same draw.
fn draw_noise(
    seed: u64,
    key: u64,
    shape: [usize; 3],
    num_steps: usize,
    dropout: f64,
) -> (usize, LatentTensor, bool) {
    let mut rng = keyed_rng(derive_seed(seed, key), 2);
    let t = rng.random_range(0..num_steps);
    let drop = dropout > 0.0 && rng.random::<f64>() < dropout;
    let n = shape.iter().product();
    let eps = LatentTensor::new(shape[0], shape[1], shape[2], normal_from(&mut rng, n))
        .expect("noise shape");
    (t, eps, drop)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub iteration: u64,
    pub loss: f64,
}

pub struct Trainer {
    model: SrModel,
    optimizer: AdamW,
    iteration: u64,
    items: Vec<TrainItem>,
    null_priors: PriorBundle,
}

impl Trainer {
    pub fn new(model: SrModel, items: Vec<TrainItem>) -> Result<Self> {
        let tc = &model.config.train;
        let optimizer = AdamW::new(
            AdamWConfig {
                learning_rate: tc.learning_rate,
                weight_decay: tc.weight_decay,
                ..AdamWConfig::default()
            },
            model.denoiser.params(),
        );
        Trainer::with_state(model, optimizer, 0, items)
    }

    /// Continues from a checkpoint. The checkpoint's own config governs training.
    pub fn resume(ckpt: &Checkpoint, items: Vec<TrainItem>) -> Result<Self> {
        let model = SrModel::from_checkpoint(ckpt, &ckpt.config)?;
        match &ckpt.optimizer {
            Some(opt) => Trainer::with_state(model, opt.clone(), ckpt.iteration, items),
            None => {
                let mut t = Trainer::new(model, items)?;
                t.iteration = ckpt.iteration;
                Ok(t)
            }
        }
    }

    fn with_state(
        model: SrModel,
        optimizer: AdamW,
        iteration: u64,
        items: Vec<TrainItem>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::config("training needs at least one record"));
        }
        let null_priors = model.encode_captions(&CaptionSet::default())?;
        Ok(Trainer {
            model,
            optimizer,
            iteration,
            items,
            null_priors,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn model(&self) -> &SrModel {
        &self.model
    }

    pub fn into_model(self) -> SrModel {
        self.model
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model
            .checkpoint(self.iteration, Some(self.optimizer.clone()))
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let tc = self.model.config.train.clone();
        let idx = batch_indices(tc.seed, self.items.len(), tc.batch_size, self.iteration);
        let num_steps = self.model.schedule().num_steps();
        let draws: Vec<(usize, LatentTensor, bool)> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let key = self.iteration.wrapping_mul(1 << 20) + j as u64;
                draw_noise(
                    tc.seed,
                    key,
                    self.items[i].z0.shape(),
                    num_steps,
                    tc.caption_dropout,
                )
            })
            .collect();
        let batch: Vec<TrainExample<'_>> = idx
            .iter()
            .zip(&draws)
            .map(|(&i, (t, eps, drop))| {
                let item = &self.items[i];
                let cond = item.prepared.conditioning();
                TrainExample {
                    z0: &item.z0,
                    cond: if *drop {
                        cond.with_priors(&self.null_priors)
                    } else {
                        cond
                    },
                    t: *t,
                    eps,
                }
            })
            .collect();
        let (loss, grads) = self
            .model
            .denoiser
            .loss_and_grads(&batch, self.model.schedule())?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                loss,
            });
        }
        self.optimizer
            .update(self.model.denoiser.params_mut(), &grads)?;
        self.iteration += 1;
        Ok(loss)
    }

    /// Trains up to `config.train.iterations`, appending to `loss.jsonl` and
    /// saving `ckpt-NNNNNN.json` every `checkpoint_every` steps and
    /// `final.json` at the end.
    pub fn run(&mut self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join(LOSS_LOG_FILE);
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let tc = self.model.config.train.clone();
        while self.iteration < tc.iterations {
            let loss = self.step()?;
            let entry = LossEntry {
                iteration: self.iteration,
                loss,
            };
            writeln!(
                log,
                "{}",
                serde_json::to_string(&entry).expect("loss entry")
            )
            .map_err(|e| Error::io(&log_path, e))?;
            if self.iteration % 100 == 0 {
                log::info!("iteration {} loss {loss:.5}", self.iteration);
            }
            if tc.checkpoint_every > 0
                && self.iteration % tc.checkpoint_every == 0
                && self.iteration < tc.iterations
            {
                self.checkpoint()
                    .save(&out_dir.join(format!("ckpt-{:06}.json", self.iteration)))?;
            }
        }
        let path = out_dir.join(FINAL_CHECKPOINT);
        self.checkpoint().save(&path)?;
        Ok(path)
    }
}

/// Mean loss over `draws` fixed `(t, ε)` draws per item, without caption
/// dropout. Comparable across checkpoints that share `seed`.
pub fn eval_loss(model: &SrModel, items: &[TrainItem], seed: u64, draws: usize) -> Result<f64> {
    if items.is_empty() || draws == 0 {
        return Err(Error::config("evaluation loss needs items and draws"));
    }
    let num_steps = model.schedule().num_steps();
    let losses: Vec<Result<f64>> = (0..items.len() * draws)
        .into_par_iter()
        .map(|k| {
            let item = &items[k / draws];
            let (t, eps, _) = draw_noise(seed, k as u64, item.z0.shape(), num_steps, 0.0);
            training_loss(
                &model.denoiser,
                &item.z0,
                &item.prepared.conditioning(),
                t,
                &eps,
                model.schedule(),
            )
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / (items.len() * draws) as f64)
}

/// Fresh model or resumed checkpoint, trained on `records`.
pub fn train(
    config: RunConfig,
    records: &[LoadedRecord],
    resume: Option<&Checkpoint>,
    out_dir: &Path,
) -> Result<PathBuf> {
    let model = match resume {
        Some(ckpt) => SrModel::from_checkpoint(ckpt, &ckpt.config)?,
        None => SrModel::init(config)?,
    };
    let items = prepare_items(&model, records)?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, items)?,
        None => Trainer::new(model, items)?,
    };
    trainer.run(out_dir)
}
