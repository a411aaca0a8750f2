//! Supervised training of the recursive network on synthetic pairs.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::extractor::PerceptualExtractor;
use crate::loss::{total_loss_with_grad, LossReport, LossWeights};
use crate::metrics::psnr;
use crate::network::{
    backward, check_divisible, forward, forward_with_tape, ArchConfig, ModelParams,
};
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::raster::{load_image, Image};
use crate::synthesis::{ManifestEntry, SampleManifest};
use crate::tensor::Tensor;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    /// Standard deviation of the Gaussian used for convolution kernels.
    pub init_std: f64,
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    /// Epochs without a new best validation PSNR before stopping; 0 disables.
    pub patience: usize,
    /// Fraction of clean images (with all their degraded variants) used for training.
    pub train_fraction: f64,
    /// Cap on validation pairs scored per epoch; `None` scores all of them.
    pub max_validation_pairs: Option<usize>,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 writes only per-epoch and final ones.
    pub checkpoint_every: u64,
    /// Steps between console progress messages; the CSV log records every step.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchConfig::default(),
            batch_size: 8,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            init_std: 0.02,
            epochs: 200,
            max_steps: None,
            patience: 20,
            train_fraction: 0.8,
            max_validation_pairs: None,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.learning_rate >= 0.0 && a.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                a.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad(format!(
                "Adam betas must lie in [0, 1), got {} and {}",
                a.beta1, a.beta2
            ));
        }
        if a.epsilon.is_nan() || a.epsilon <= 0.0 {
            return bad(format!("Adam epsilon must be positive, got {}", a.epsilon));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad(format!(
                "init_std must be finite and >= 0, got {}",
                self.init_std
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// Gaussian kernels, zero biases, and a zero non-local output projection so
/// every non-local unit starts as the identity.
pub fn init_params(arch: ArchConfig, std: f64, seed: u64) -> Result<ModelParams<f32>> {
    let mut m = ModelParams::<f32>::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal =
        Normal::new(0.0, std).map_err(|e| Error::Validation(format!("init_std {std}: {e}")))?;
    for (name, p) in m.named_params_mut() {
        if name.ends_with(".bias") || name.contains("nl.wz") {
            p.fill_zero();
        } else {
            p.data
                .iter_mut()
                .for_each(|v| *v = normal.sample(&mut rng) as f32);
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ManifestEntry>,
    pub validation: Vec<ManifestEntry>,
}

/// Splits by clean image so no clean image contributes to both sides.
pub fn split_dataset(
    manifest: &SampleManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut ids = manifest.clean_ids();
    if ids.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 distinct clean images to split, manifest has {}",
            ids.len()
        )));
    }
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ids.len() as f64 * train_fraction).round() as usize).clamp(1, ids.len() - 1);
    let train_ids: std::collections::HashSet<&String> = ids[..n_train].iter().collect();
    let (train, validation) = manifest
        .entries
        .iter()
        .cloned()
        .partition(|e| train_ids.contains(&e.clean_id));
    Ok(DatasetSplit { train, validation })
}

/// Loads `(degraded, clean)` batches from disk.
struct PairLoader<'a> {
    manifest: &'a SampleManifest,
    size: Option<(usize, usize)>,
}

impl PairLoader<'_> {
    fn load(&mut self, entries: &[&ManifestEntry]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut xs = Vec::with_capacity(entries.len());
        let mut ys = Vec::with_capacity(entries.len());
        for e in entries {
            let x = load_image(&self.manifest.degraded_path(e))?;
            let y = load_image(&self.manifest.clean_path(e))?;
            if (x.height(), x.width()) != (y.height(), y.width()) {
                return Err(Error::shape(
                    format!("pair {} / {}", e.degraded_id, e.clean_id),
                    (y.height(), y.width()),
                    (x.height(), x.width()),
                ));
            }
            check_divisible(x.height(), x.width())?;
            match self.size {
                None => self.size = Some((x.height(), x.width())),
                Some(s) if s != (x.height(), x.width()) => {
                    return Err(Error::shape(
                        format!("training image {}", e.degraded_id),
                        s,
                        (x.height(), x.width()),
                    ))
                }
                _ => {}
            }
            xs.push(x.to_tensor());
            ys.push(y.to_tensor());
        }
        Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
    }
}

/// Order of training entries in `epoch`; a pure function of `(seed, epoch)`
/// so an interrupted run resumes on the same sequence.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs_completed: u64,
    pub final_train_loss: Option<f64>,
    /// Best mean validation PSNR (dB) seen at an epoch boundary.
    pub best_validation_psnr: Option<f64>,
    pub stopped_early: bool,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

/// Appends one CSV row per step: `step,loss_total,loss_per1..,loss_l1,seconds`.
struct TrainLog {
    file: fs::File,
    path: PathBuf,
}

impl TrainLog {
    fn open(path: &Path, stages: usize, append: bool) -> Result<Self> {
        let fresh = !append || !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            let per: Vec<String> = (1..=stages).map(|t| format!("loss_per{t}")).collect();
            writeln!(file, "step,loss_total,{},loss_l1,seconds", per.join(","))
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(TrainLog {
            file,
            path: path.to_path_buf(),
        })
    }

    fn row(&mut self, step: u64, r: &LossReport, seconds: f64) -> Result<()> {
        let per: Vec<String> = r.perceptual.iter().map(|v| format!("{v}")).collect();
        writeln!(
            self.file,
            "{step},{},{},{},{seconds:.3}",
            r.total,
            per.join(","),
            r.l1
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}

/// Everything a training run needs besides its configuration.
pub struct TrainRun<'a> {
    pub config: &'a TrainConfig,
    pub manifest: &'a SampleManifest,
    pub extractor: &'a PerceptualExtractor<f32>,
    pub output_dir: &'a Path,
    /// Continue from this checkpoint (parameters, optimizer state and step).
    pub resume: Option<Checkpoint>,
}

/// Mean PSNR of the final stage against the clean reference over `entries`.
pub fn validation_psnr(
    model: &ModelParams<f32>,
    manifest: &SampleManifest,
    entries: &[ManifestEntry],
    batch_size: usize,
) -> Result<f64> {
    let mut loader = PairLoader {
        manifest,
        size: None,
    };
    let mut sum = 0.0;
    for chunk in entries.chunks(batch_size.max(1)) {
        let refs: Vec<&ManifestEntry> = chunk.iter().collect();
        let (x, y) = loader.load(&refs)?;
        let out = forward(&x, model)?;
        for i in 0..chunk.len() {
            sum += psnr(
                &Image::from_tensor(out.last(), i)?,
                &Image::from_tensor(&y, i)?,
            )?;
        }
    }
    Ok(sum / entries.len().max(1) as f64)
}

pub fn train(run: TrainRun<'_>) -> Result<TrainSummary> {
    let cfg = run.config;
    cfg.validate()?;
    fs::create_dir_all(run.output_dir).map_err(|e| Error::io(run.output_dir, e))?;
    let split = split_dataset(run.manifest, cfg.train_fraction, cfg.seed)?;
    let mut validation = split.validation;
    if let Some(cap) = cfg.max_validation_pairs {
        validation.truncate(cap);
    }

    let resuming = run.resume.is_some();
    let (mut model, mut adam) = match run.resume {
        Some(ck) => {
            if ck.model.arch != cfg.arch {
                return Err(Error::Validation(format!(
                    "checkpoint architecture {:?} differs from configured {:?}",
                    ck.model.arch, cfg.arch
                )));
            }
            let state = ck.optimizer.unwrap_or_else(|| {
                let mut s = AdamState::new(&ck.model);
                s.step = ck.step;
                s
            });
            let adam = Adam {
                config: cfg.adam,
                state,
            };
            (ck.model, adam)
        }
        None => {
            let m = init_params(cfg.arch, cfg.init_std, cfg.seed)?;
            let adam = Adam::new(cfg.adam, &m);
            (m, adam)
        }
    };

    let last_path = run.output_dir.join(LAST_CHECKPOINT);
    let best_path = run.output_dir.join(BEST_CHECKPOINT);
    let mut log = TrainLog::open(&run.output_dir.join(TRAIN_LOG), cfg.arch.stages, resuming)?;
    let mut loader = PairLoader {
        manifest: run.manifest,
        size: None,
    };
    let n_train = split.train.len();
    let steps_per_epoch = n_train.div_ceil(cfg.batch_size) as u64;
    let max_steps = cfg
        .max_steps
        .unwrap_or(u64::MAX)
        .min(steps_per_epoch * cfg.epochs as u64);
    let save = |model: &ModelParams<f32>, adam: &Adam, path: &Path| {
        save_checkpoint(
            path,
            &Checkpoint {
                model: model.clone(),
                step: adam.state.step,
                optimizer: Some(adam.state.clone()),
            },
        )
    };

    log::info!(
        "training {} parameters on {} pairs ({} validation), {} steps per epoch",
        model.num_parameters(),
        n_train,
        validation.len(),
        steps_per_epoch
    );
    let start = Instant::now();
    let mut final_train_loss = None;
    let mut best_val: Option<f64> = None;
    let mut best_saved = false;
    let mut stale_epochs = 0usize;
    let mut stopped_early = false;
    let mut step_in_epoch = adam.state.step % steps_per_epoch;
    let mut epoch = adam.state.step / steps_per_epoch;

    while adam.state.step < max_steps {
        let order = epoch_order(n_train, cfg.seed, epoch);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for idx in &batches[step_in_epoch as usize..] {
            if adam.state.step >= max_steps {
                break;
            }
            let entries: Vec<&ManifestEntry> = idx.iter().map(|&i| &split.train[i]).collect();
            let (x, y) = loader.load(&entries)?;
            let step = adam.state.step + 1;
            let diverged = || Error::Diverged {
                step,
                batch: entries
                    .iter()
                    .map(|e| e.degraded_id.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            };
            let (outputs, tape) = match forward_with_tape(&x, &model) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            let (report, grads) = total_loss_with_grad(&outputs, &y, run.extractor, &cfg.loss)?;
            if !report.is_finite() {
                return Err(diverged());
            }
            let (pgrads, _) = backward(&tape, &model, &grads)?;
            adam.step(&mut model, &pgrads);
            final_train_loss = Some(report.total);
            log.row(step, &report, start.elapsed().as_secs_f64())?;
            if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
                log::info!("step {step}: loss {:.4}", report.total);
            }
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                save(&model, &adam, &last_path)?;
            }
        }
        step_in_epoch = 0;
        if adam.state.step < (epoch + 1) * steps_per_epoch {
            break; // step budget exhausted mid-epoch
        }
        epoch += 1;
        save(&model, &adam, &last_path)?;

        if !validation.is_empty() {
            let v = validation_psnr(&model, run.manifest, &validation, cfg.batch_size)?;
            log::info!("epoch {epoch}: validation PSNR {v:.3} dB");
            if best_val.is_none_or(|b| v > b) {
                best_val = Some(v);
                stale_epochs = 0;
                save(&model, &adam, &best_path)?;
                best_saved = true;
            } else {
                stale_epochs += 1;
                if cfg.patience > 0 && stale_epochs >= cfg.patience {
                    log::info!("validation PSNR flat for {stale_epochs} epochs, stopping");
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    save(&model, &adam, &last_path)?;

    Ok(TrainSummary {
        steps: adam.state.step,
        epochs_completed: adam.state.step / steps_per_epoch,
        final_train_loss,
        best_validation_psnr: best_val,
        stopped_early,
        last_checkpoint: last_path,
        best_checkpoint: best_saved.then_some(best_path),
    })
}

/// Per-pair counts by clean id; useful for reporting a split.
pub fn entries_per_clean_id(entries: &[ManifestEntry]) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for e in entries {
        *counts.entry(e.clean_id.as_str()).or_insert(0) += 1;
    }
    counts
}
