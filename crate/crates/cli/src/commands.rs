use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{de::DeserializeOwned, Serialize};

use nuigo::checkpoint::load_checkpoint;
use nuigo::enhance::enhance_stages;
use nuigo::extractor::load_vgg;
use nuigo::metrics::evaluate_pairs;
use nuigo::raster::{list_images, load_image, save_png16, save_png8};
use nuigo::synthesis::{synthesize_dataset, GammaConvention, SampleManifest, SynthesisConfig};
use nuigo::train::{TrainConfig, TrainRun};

use crate::{EnhanceArgs, EvaluateArgs, SynthesizeArgs, TrainArgs};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

/// Bad user input detected by the CLI itself.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// 1 for input the user can fix (bad flags, paths, configs, incompatible
/// checkpoints or weights), 2 for failures while running.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return EXIT_VALIDATION;
        }
        if let Some(err) = cause.downcast_ref::<nuigo::Error>() {
            return match err {
                nuigo::Error::Checkpoint(_) | nuigo::Error::Extractor(_) => EXIT_VALIDATION,
                e if e.is_validation() => EXIT_VALIDATION,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GammaArg {
    /// mask = lightness^gamma
    Power,
    /// mask = lightness^(1/gamma)
    InversePower,
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(invalid(format!(
            "{what} {} is not a directory",
            path.display()
        )));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(invalid(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    require_file(path, "config file")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| invalid(format!("config file {}: {e}", path.display())))
}

/// Writes the effective configuration next to the outputs it produced.
fn echo_config(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = toml::to_string_pretty(value).context("serializing effective config")?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn synthesize(a: SynthesizeArgs) -> Result<()> {
    require_dir(&a.input, "input directory")?;
    let mut config: SynthesisConfig = read_config(a.config.as_deref())?;
    if let Some(t) = a.thresholds {
        config.thresholds = t;
    }
    if let Some(s) = a.seed {
        config.rng_seed = s;
    }
    if let Some(v) = a.gamma_min {
        config.gamma_min = v;
    }
    if let Some(v) = a.gamma_max {
        config.gamma_max = v;
    }
    if let Some(g) = a.gamma_convention {
        config.gamma_convention = match g {
            GammaArg::Power => GammaConvention::Power,
            GammaArg::InversePower => GammaConvention::InversePower,
        };
    }
    if let Some(s) = a.image_size {
        config.image_size = s;
    }
    config.save_masks |= a.save_masks;
    config.validate()?;

    let manifest = synthesize_dataset(&a.input, &a.output, &config)?;
    echo_config(&a.output, "synthesis_config.toml", &config)?;
    let mut per_threshold: BTreeMap<String, usize> = BTreeMap::new();
    for e in &manifest.entries {
        *per_threshold.entry(e.threshold.to_string()).or_default() += 1;
    }
    println!(
        "{} pairs written from {} images to {}",
        manifest.len(),
        manifest.clean_ids().len(),
        a.output.display()
    );
    for (t, n) in per_threshold {
        println!("  threshold {t}: {n}");
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c: TrainConfig = read_config(a.config.as_deref())?;
    macro_rules! set {
        ($flag:expr, $($field:tt)+) => {
            if let Some(v) = $flag {
                c.$($field)+ = v;
            }
        };
    }
    set!(a.seed, seed);
    set!(a.epochs, epochs);
    set!(a.batch_size, batch_size);
    set!(a.lr, adam.learning_rate);
    set!(a.lambda_l1, loss.lambda_l1);
    set!(a.init_std, init_std);
    set!(a.patience, patience);
    set!(a.train_fraction, train_fraction);
    set!(a.checkpoint_every, checkpoint_every);
    set!(a.stages, arch.stages);
    set!(a.channels, arch.channels);
    set!(a.inner_channels, arch.inner_channels);
    if a.max_steps.is_some() {
        c.max_steps = a.max_steps;
    }
    if a.untied {
        c.arch.weight_sharing = false;
    }
    c.validate()?;
    Ok(c)
}

pub fn train(a: TrainArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let config = train_config(&a)?;
    let extractor = load_vgg::<f32>(&a.extractor_weights)?;
    let manifest = SampleManifest::load(&a.manifest)?;
    let resume = a
        .resume
        .as_deref()
        .map(|p| {
            require_file(p, "checkpoint")?;
            Ok::<_, anyhow::Error>(load_checkpoint(p, Some(config.arch))?)
        })
        .transpose()?;
    if let Some(ck) = &resume {
        println!("resuming from step {}", ck.step);
    }
    echo_config(&a.output, "train_config.toml", &config)?;
    log::info!("perceptual extractor: {}", extractor.describe());

    let summary = nuigo::train::train(TrainRun {
        config: &config,
        manifest: &manifest,
        extractor: &extractor,
        output_dir: &a.output,
        resume,
    })?;
    println!(
        "trained {} steps ({} epochs{}); final loss {}",
        summary.steps,
        summary.epochs_completed,
        if summary.stopped_early {
            ", stopped early"
        } else {
            ""
        },
        summary
            .final_train_loss
            .map_or("n/a".to_string(), |l| format!("{l:.4}"))
    );
    if let Some(v) = summary.best_validation_psnr {
        println!("best validation PSNR {v:.3} dB");
    }
    println!("checkpoint: {}", summary.last_checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct EnhanceEcho<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    all_stages: bool,
    bit_depth: u8,
    step: u64,
    arch: nuigo::ArchConfig,
}

pub fn enhance(a: EnhanceArgs) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    let inputs: Vec<PathBuf> = if a.input.is_file() {
        vec![a.input.clone()]
    } else {
        require_dir(&a.input, "input")?;
        list_images(&a.input)?
    };
    if inputs.is_empty() {
        bail!(invalid(format!(
            "no PNG/JPEG images in {}",
            a.input.display()
        )));
    }
    let ck = load_checkpoint(&a.checkpoint, None)?;
    echo_config(
        &a.output,
        "enhance_config.toml",
        &EnhanceEcho {
            checkpoint: &a.checkpoint,
            input: &a.input,
            all_stages: a.all_stages,
            bit_depth: a.bit_depth,
            step: ck.step,
            arch: ck.model.arch,
        },
    )?;
    let save = |path: &Path, img: &nuigo::Image| match a.bit_depth {
        8 => save_png8(path, img),
        _ => save_png16(path, img),
    };
    let mut written = 0;
    for path in &inputs {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let img = load_image(path)?;
        let stages = enhance_stages(&ck.model, &img)?;
        if a.all_stages {
            for (t, s) in stages.iter().enumerate() {
                save(&a.output.join(format!("{stem}_stage{}.png", t + 1)), s)?;
                written += 1;
            }
        } else {
            save(
                &a.output.join(format!("{stem}.png")),
                stages.last().expect("stages"),
            )?;
            written += 1;
        }
    }
    println!(
        "enhanced {} images, {written} files written to {}",
        inputs.len(),
        a.output.display()
    );
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    require_dir(&a.pred, "prediction directory")?;
    require_dir(&a.reference, "reference directory")?;
    let manifest = match &a.manifest {
        Some(p) => {
            require_file(p, "manifest")?;
            Some(SampleManifest::load(p)?)
        }
        None => None,
    };
    let report = evaluate_pairs(&a.pred, &a.reference, manifest.as_ref())?;
    report.write_csv(&a.report)?;
    println!("{}", report.summary());
    if !report.failures.is_empty() {
        for (id, why) in &report.failures {
            eprintln!("failed to evaluate {id}: {why}");
        }
        bail!("{} pairs could not be evaluated", report.failures.len());
    }
    Ok(())
}
