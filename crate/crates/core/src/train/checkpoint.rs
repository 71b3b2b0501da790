use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::step::TrainState;
use crate::error::{Error, Result};
use crate::nn::{DerainModel, ParamGroup};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "meta.json";

/// JSON record stored in the archive header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub adam_steps: BTreeMap<ParamGroup, u64>,
}

fn to_bytes(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            StDtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn corrupt(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Writes parameters, optimizer moments and metadata to one safetensors archive.
pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut arrays: Vec<(String, Vec<usize>, StDtype, Vec<u8>)> = Vec::new();
    for (name, var) in state.model.params().iter() {
        let (dt, bytes) = to_bytes(var.as_tensor())?;
        arrays.push((format!("param/{name}"), var.dims().to_vec(), dt, bytes));
    }
    let mut adam_steps = BTreeMap::new();
    for g in ParamGroup::ALL {
        let adam = state.optimizer(g);
        adam_steps.insert(g, adam.steps());
        for (name, m, v) in adam.moments() {
            for (kind, t) in [("m", m), ("v", v)] {
                let (dt, bytes) = to_bytes(t)?;
                arrays.push((
                    format!("adam/{}/{kind}/{name}", g.prefix()),
                    t.dims().to_vec(),
                    dt,
                    bytes,
                ));
            }
        }
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        epoch: state.epoch,
        global_step: state.global_step,
        rng: state.rng.clone(),
        adam_steps,
    };
    let views = arrays
        .iter()
        .map(|(name, shape, dt, bytes)| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| corrupt(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
    let bytes = safetensors::serialize(views, Some(header)).map_err(|e| corrupt(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Decoded archive: metadata plus every named array.
pub struct Archive {
    pub meta: CheckpointMeta,
    arrays: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn read(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(path, e))?;
        let raw_meta = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| corrupt(path, "no meta.json record"))?;
        let version: serde_json::Value = serde_json::from_str(raw_meta).map_err(|e| corrupt(path, e))?;
        let found = version["format_version"]
            .as_u64()
            .ok_or_else(|| corrupt(path, "no format_version"))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::FormatVersion {
                found: found as u32,
                expected: FORMAT_VERSION,
            });
        }
        let meta: CheckpointMeta = serde_json::from_str(raw_meta).map_err(|e| corrupt(path, e))?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            let dtype = match view.dtype() {
                StDtype::F32 => DType::F32,
                StDtype::F64 => DType::F64,
                other => return Err(corrupt(path, format!("{name}: unsupported dtype {other:?}"))),
            };
            let t = Tensor::from_raw_buffer(view.data(), dtype, view.shape(), device)?;
            arrays.insert(name, t);
        }
        Ok(Self { meta, arrays })
    }

    fn get(&self, key: &str, what: &str) -> Result<&Tensor> {
        self.arrays
            .get(key)
            .ok_or_else(|| Error::MissingParam(what.to_string()))
    }

    /// Copies parameters into `model`, checking names and shapes first.
    pub fn load_params(&self, model: &DerainModel) -> Result<()> {
        for (name, var) in model.params().iter() {
            let t = self.get(&format!("param/{name}"), name)?;
            if t.dims() != var.dims() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: var.dims().to_vec(),
                    found: t.dims().to_vec(),
                });
            }
        }
        for (name, var) in model.params().iter() {
            var.set(&self.arrays[&format!("param/{name}")].to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Restores parameters, optimizer state, counters and RNG into `state`.
    pub fn restore(&self, state: &mut TrainState) -> Result<()> {
        self.load_params(&state.model)?;
        for g in ParamGroup::ALL {
            let names: Vec<String> = state.optimizer(g).moments().map(|(n, _, _)| n.clone()).collect();
            let mut moments = BTreeMap::new();
            for name in names {
                let m = self.get(&format!("adam/{}/m/{name}", g.prefix()), &format!("adam m of {name}"))?;
                let v = self.get(&format!("adam/{}/v/{name}", g.prefix()), &format!("adam v of {name}"))?;
                moments.insert(name, (m.clone(), v.clone()));
            }
            let steps = self.meta.adam_steps.get(&g).copied().unwrap_or(0);
            state.optimizer_mut(g).restore(steps, &moments)?;
        }
        state.epoch = self.meta.epoch;
        state.global_step = self.meta.global_step;
        state.rng = self.meta.rng.clone();
        Ok(())
    }
}

/// Rebuilds the training state and config stored at `path`.
pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<(TrainState, TrainConfig)> {
    let archive = Archive::read(path, device)?;
    let cfg = archive.meta.config.clone();
    let mut state = TrainState::new(&cfg, device)?;
    archive.restore(&mut state)?;
    Ok((state, cfg))
}

/// Loads into an existing state whose model configuration may differ from the file's.
pub fn load_checkpoint_into(path: impl AsRef<Path>, state: &mut TrainState) -> Result<CheckpointMeta> {
    let archive = Archive::read(path, state.model.device())?;
    archive.restore(state)?;
    Ok(archive.meta)
}

/// Model weights and config only, for inference.
pub fn load_model(path: impl AsRef<Path>, device: &Device) -> Result<(DerainModel, TrainConfig)> {
    let archive = Archive::read(path, device)?;
    let cfg = archive.meta.config.clone();
    let model = DerainModel::new(&cfg.model, cfg.seed, device, cfg.precision.dtype())?;
    archive.load_params(&model)?;
    Ok((model, cfg))
}
