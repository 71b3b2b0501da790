use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use derain_core::data::{list_images, DatasetManifest};
use derain_core::image::ImageTensor;
use derain_core::metrics::{evaluate_dataset, input_baseline, EvalOptions, MetricsReport};
use derain_core::nn::{DerainModel, Derainer, GeneratorChoice, IdentityDerainer, ModelConfig};
use derain_core::toy::{generate_toy_rain, toy_background, ToyRainConfig};
use derain_core::train::{load_model, train as run_training, TrainConfig, TrainOutcome};
use serde::Serialize;

use crate::config::{DataPaths, OutputPaths, RunConfig};
use crate::{Ablation, DerainArgs, EvaluateArgs, GenToyArgs, GeneratorArg, ModelArgs, TrainArgs};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

/// Per-image seed derived from the corpus seed; streams for clean, rain and real images differ.
fn item_seed(seed: u64, stream: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream << 32)
        .wrapping_add(index as u64)
}

/// Training settings for the small model on a toy corpus of `size`-pixel images.
///
/// A few hundred steps from a flat initial output need a larger supervised rate
/// than full-scale runs; the decay over the second half settles the adversarial noise.
pub fn desk_train_config(size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        decay_start_epoch: 50,
        lr_super: 1e-3,
        batch_size: 4,
        patch: size,
        stride: size,
        seed,
        checkpoint_every: 50,
        model: ModelConfig::desk(),
        ..TrainConfig::default()
    }
}

#[derive(Serialize)]
struct ToyRecord<'a> {
    count: usize,
    real_count: usize,
    size: usize,
    seed: u64,
    synthetic: &'a ToyRainConfig,
    pseudo_real: Option<&'a ToyRainConfig>,
}

/// Removes images this command wrote earlier so reruns never append.
fn reset_image_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for name in list_images(dir)? {
        let p = dir.join(name);
        fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
    }
    Ok(())
}

fn image_name(i: usize) -> String {
    format!("{i:04}.png")
}

pub fn gen_toy(a: &GenToyArgs) -> Result<()> {
    let out = &a.out;
    let mut synthetic = ToyRainConfig::synthetic(a.size, a.seed);
    if let Some(n) = a.streaks {
        synthetic.streak_count = n;
    }
    synthetic.validate()?;
    let pseudo_real = a.domain_gap.then(|| ToyRainConfig {
        angle_range: ToyRainConfig::pseudo_real(a.size, a.seed).angle_range,
        ..synthetic.clone()
    });
    let real_count = if a.domain_gap {
        a.real_count.unwrap_or(a.count / 2)
    } else {
        0
    };

    let rain_dir = out.join("paired").join("rain");
    let clean_dir = out.join("paired").join("clean");
    let real_dir = out.join("real");
    reset_image_dir(&rain_dir)?;
    reset_image_dir(&clean_dir)?;
    for i in 0..a.count {
        let clean = toy_background(a.size, item_seed(a.seed, 0, i))?;
        let cfg = ToyRainConfig {
            seed: item_seed(a.seed, 1, i),
            ..synthetic.clone()
        };
        let (rainy, _) = generate_toy_rain(&cfg, &clean)?;
        rainy.save_png(rain_dir.join(image_name(i)))?;
        clean.save_png(clean_dir.join(image_name(i)))?;
    }
    if let Some(real_cfg) = &pseudo_real {
        reset_image_dir(&real_dir)?;
        for i in 0..real_count {
            let clean = toy_background(a.size, item_seed(a.seed, 2, i))?;
            let cfg = ToyRainConfig {
                seed: item_seed(a.seed, 3, i),
                ..real_cfg.clone()
            };
            let (rainy, _) = generate_toy_rain(&cfg, &clean)?;
            rainy.save_png(real_dir.join(image_name(i)))?;
        }
    }

    let record = ToyRecord {
        count: a.count,
        real_count,
        size: a.size,
        seed: a.seed,
        synthetic: &synthetic,
        pseudo_real: pseudo_real.as_ref(),
    };
    fs::write(out.join("toy_config.json"), serde_json::to_string_pretty(&record)?)?;
    let manifest = DatasetManifest {
        paired_root: out.join("paired"),
        unpaired_root: a.domain_gap.then(|| real_dir.clone()),
        seed: a.seed,
    };
    manifest.save(out.join("manifest.json"))?;
    let mut train = desk_train_config(a.size, a.seed);
    train.ablations.use_unsupervised = a.domain_gap;
    let run = RunConfig {
        data: DataPaths {
            paired_root: Some(manifest.paired_root.clone()),
            unpaired_root: manifest.unpaired_root.clone(),
        },
        output: OutputPaths {
            out_dir: Some(out.join("run")),
        },
        train,
        toy: Some(synthetic),
    };
    run.save(&out.join("run.toml"))?;
    log::info!(
        "wrote {} pairs and {real_count} pseudo-real images to {}",
        a.count,
        out.display()
    );
    Ok(())
}

/// Merges the config file with command-line overrides and checks required keys.
pub fn effective_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.paired_root {
        cfg.data.paired_root = Some(p.clone());
    }
    if let Some(p) = &a.unpaired_root {
        cfg.data.unpaired_root = Some(p.clone());
    }
    if let Some(p) = &a.out {
        cfg.output.out_dir = Some(p.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    for ab in &a.ablation {
        let flags = &mut cfg.train.ablations;
        match ab {
            Ablation::NoPerceptual => flags.use_perceptual = false,
            Ablation::NoTv => flags.use_tv = false,
            Ablation::NoPairedDisc => flags.use_paired_disc = false,
            Ablation::NoUnsupervised => flags.use_unsupervised = false,
        }
    }
    if cfg.data.paired_root.is_none() {
        bail!("missing `data.paired_root`: set it in the config or pass --paired-root");
    }
    if cfg.output.out_dir.is_none() {
        bail!("missing `output.out_dir`: set it in the config or pass --out");
    }
    if cfg.train.ablations.use_unsupervised && cfg.data.unpaired_root.is_none() {
        bail!(
            "missing `data.unpaired_root` while `train.ablations.use_unsupervised` is true: \
             pass --unpaired-root or --ablation no-unsupervised"
        );
    }
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = effective_config(a)?;
    let out_dir: PathBuf = cfg.output.out_dir.clone().expect("checked");
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    cfg.save(&out_dir.join(EFFECTIVE_CONFIG))?;
    let paired = cfg.data.paired_root.as_deref().expect("checked");
    let unpaired = cfg.data.unpaired_root.as_deref();
    let outcome = run_training(&cfg.train, paired, unpaired, &out_dir)?;
    if let Some(last) = &outcome.last {
        println!(
            "trained {} steps; final total loss {:.6}; checkpoint {}",
            outcome.steps,
            last.total,
            outcome.checkpoint.display()
        );
    }
    Ok(outcome)
}

enum Loaded {
    Identity,
    Model(Box<DerainModel>, GeneratorChoice),
}

impl Loaded {
    fn open(m: &ModelArgs) -> Result<Self> {
        if m.identity {
            return Ok(Loaded::Identity);
        }
        let path = m
            .checkpoint
            .as_ref()
            .context("--checkpoint is required without --identity")?;
        let (model, _) = load_model(path, &Device::Cpu).with_context(|| format!("loading {}", path.display()))?;
        let which = match m.generator {
            GeneratorArg::Synthetic => GeneratorChoice::Synthetic,
            GeneratorArg::Real => GeneratorChoice::Real,
        };
        Ok(Loaded::Model(Box::new(model), which))
    }

    fn id(m: &ModelArgs) -> String {
        match (&m.checkpoint, m.identity) {
            (_, true) => "identity".into(),
            (Some(p), false) => p.display().to_string(),
            (None, false) => String::new(),
        }
    }

    fn derainer(&self) -> Box<dyn Derainer + '_> {
        match self {
            Loaded::Identity => Box::new(IdentityDerainer),
            Loaded::Model(model, which) => Box::new((model.as_ref(), *which)),
        }
    }
}

/// Returns 1 when any file failed; the others are still written.
pub fn derain(a: &DerainArgs) -> Result<i32> {
    let loaded = Loaded::open(&a.model)?;
    let derainer = loaded.derainer();
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let names = list_images(&a.input)?;
    let mut failed = 0usize;
    for name in &names {
        let result = ImageTensor::load(a.input.join(name))
            .and_then(|img| derainer.derain(&img))
            .and_then(|out| out.save_png(a.output.join(Path::new(name).with_extension("png"))));
        if let Err(e) = result {
            log::error!("{name}: {e}");
            failed += 1;
        }
    }
    println!(
        "derained {} of {} images into {}",
        names.len() - failed,
        names.len(),
        a.output.display()
    );
    Ok(if failed > 0 { 1 } else { 0 })
}

fn print_row(label: &str, r: &MetricsReport) {
    println!("{label:<10} {:>12.6} {:>10.6}", r.mean_psnr_db, r.mean_ssim);
}

pub fn evaluate(a: &EvaluateArgs) -> Result<MetricsReport> {
    let opts = EvalOptions {
        luminance_ssim: a.luminance,
    };
    let loaded = Loaded::open(&a.model)?;
    let report = evaluate_dataset(loaded.derainer().as_ref(), &a.test_root, &Loaded::id(&a.model), opts)?;
    report.save_json(&a.report)?;
    if let Some(csv) = &a.csv {
        report.save_csv(csv)?;
    }
    println!("{:<10} {:>12} {:>10}", "method", "PSNR(dB)", "SSIM");
    print_row("model", &report);
    if a.with_baseline {
        print_row("input", &input_baseline(&a.test_root, opts)?);
    }
    Ok(report)
}
