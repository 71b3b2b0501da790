use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Device;

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::step::TrainState;
use crate::data::{
    load_paired_dataset, load_unpaired_dataset, patch_paired, patch_unpaired, MixedLoader, PairedSample, UnpairedSample,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{LossBreakdown, LossRecord};
use crate::nn::GeneratorChoice;

pub const LOSS_LOG: &str = "losses.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
const SAMPLES_PER_DUMP: usize = 2;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub last: Option<LossBreakdown>,
}

/// Loads both corpora, cuts patches and trains; see [`train_on`].
pub fn train(
    cfg: &TrainConfig,
    paired_root: impl AsRef<Path>,
    unpaired_root: Option<&Path>,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let paired = load_paired_dataset(paired_root)?;
    let unpaired = match (cfg.ablations.use_unsupervised, unpaired_root) {
        (false, _) => Vec::new(),
        (true, None) => {
            return Err(Error::Config(
                "the unsupervised process needs an unpaired root \
                 (or set ablations.use_unsupervised = false)"
                    .into(),
            ))
        }
        (true, Some(root)) => {
            let pool: Vec<ImageTensor> = paired.iter().map(|s| s.clean.clone()).collect();
            load_unpaired_dataset(root, &pool, cfg.seed)?
        }
    };
    let paired = patch_paired(&paired, cfg.patch, cfg.stride)?;
    let unpaired = patch_unpaired(&unpaired, cfg.patch, cfg.stride)?;
    train_on(cfg, &paired, &unpaired, out_dir)
}

/// Runs `epochs x steps_per_epoch` steps on already patched samples.
///
/// Writes one JSON line per step to `losses.jsonl`, a checkpoint and sample
/// triplets every `checkpoint_every` epochs, and `final.safetensors` at the end.
pub fn train_on(
    cfg: &TrainConfig,
    paired: &[PairedSample],
    unpaired: &[UnpairedSample],
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    if cfg.ablations.use_unsupervised && unpaired.is_empty() {
        return Err(Error::EmptyDataset(
            "no real patches for the unsupervised process".into(),
        ));
    }
    let unpaired = if cfg.ablations.use_unsupervised { unpaired } else { &[] };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let device = Device::Cpu;
    let dtype = cfg.precision.dtype();
    let loader = MixedLoader::new(paired, unpaired, cfg.batch_size, cfg.seed)?.with_device(device.clone(), dtype);
    let mut state = TrainState::new(cfg, &device)?;

    let log_path = out_dir.join(LOSS_LOG);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut last = None;
    log::info!(
        "training {} epochs x {} steps on {} paired / {} real patches",
        cfg.epochs,
        loader.steps_per_epoch(),
        paired.len(),
        unpaired.len()
    );
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        for batch in loader.epoch(epoch) {
            let (p, u) = batch?;
            let losses = state.train_step(&p, u.as_ref(), cfg)?;
            let record = LossRecord {
                step: state.global_step,
                epoch,
                losses,
                weights: cfg.weights,
            };
            serde_json::to_writer(&mut log, &record)?;
            writeln!(log).map_err(|e| Error::io(&log_path, e))?;
            last = Some(losses);
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if let Some(l) = &last {
            log::debug!("epoch {epoch}: total {:.5} (d_s {:.4})", l.total, l.d_s);
        }
        if (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            state.epoch = epoch + 1;
            save_checkpoint(&state, cfg, out_dir.join(format!("epoch_{}.safetensors", epoch + 1)))?;
            dump_samples(
                &state,
                paired,
                &out_dir.join("samples").join(format!("epoch_{}", epoch + 1)),
            )?;
        }
    }
    state.epoch = cfg.epochs;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&state, cfg, &checkpoint)?;
    dump_samples(
        &state,
        paired,
        &out_dir.join("samples").join(format!("epoch_{}", cfg.epochs)),
    )?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        steps: state.global_step,
        last,
    })
}

/// Writes `input | derained | reference` PNGs for the first few paired samples.
fn dump_samples(state: &TrainState, paired: &[PairedSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in paired.iter().take(SAMPLES_PER_DUMP).enumerate() {
        let derained = state.model.derain_image(&s.rainy, GeneratorChoice::Synthetic)?;
        s.rainy.save_png(dir.join(format!("{i:02}_input.png")))?;
        derained.save_png(dir.join(format!("{i:02}_derained.png")))?;
        s.clean.save_png(dir.join(format!("{i:02}_reference.png")))?;
    }
    Ok(())
}

/// Reads a loss log back.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
