//! Dataset ingestion, patch extraction and the mixed synthetic/real batch stream.
//!
//! Paired corpora live under `root/rain/` and `root/clean/` with identical file
//! names. Real rainy images are a flat directory; each is given a "fake label"
//! drawn uniformly from the clean synthetic pool.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{is_image_file, stack_images, ImageTensor};

/// A synthetic rainy image and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub name: String,
    pub rainy: ImageTensor,
    pub clean: ImageTensor,
}

impl PairedSample {
    pub fn new(name: impl Into<String>, rainy: ImageTensor, clean: ImageTensor) -> Result<Self> {
        rainy.ensure_same_shape(&clean, "paired sample")?;
        Ok(Self {
            name: name.into(),
            rainy,
            clean,
        })
    }
}

/// A real rainy image with a clean image from the synthetic set standing in for its label.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpairedSample {
    pub name: String,
    pub rainy: ImageTensor,
    pub fake_label: ImageTensor,
}

impl UnpairedSample {
    pub fn new(name: impl Into<String>, rainy: ImageTensor, fake_label: ImageTensor) -> Result<Self> {
        rainy.ensure_same_shape(&fake_label, "unpaired sample")?;
        Ok(Self {
            name: name.into(),
            rainy,
            fake_label,
        })
    }
}

/// Mixed-dataset descriptor (`synthetic & real`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub paired_root: PathBuf,
    #[serde(default)]
    pub unpaired_root: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Sorted image file names in `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_image_file(&path) {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_paired_dataset(root: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    let root = root.as_ref();
    let rain_dir = root.join("rain");
    let clean_dir = root.join("clean");
    for dir in [&rain_dir, &clean_dir] {
        if !dir.is_dir() {
            return Err(Error::EmptyDataset(format!(
                "{} is not a paired dataset: missing {} (ground truth is required)",
                root.display(),
                dir.display()
            )));
        }
    }
    let rain_names = list_images(&rain_dir)?;
    let clean_names = list_images(&clean_dir)?;
    for name in &rain_names {
        if clean_names.binary_search(name).is_err() {
            return Err(Error::MissingCounterpart {
                name: name.clone(),
                missing_in: clean_dir,
            });
        }
    }
    for name in &clean_names {
        if rain_names.binary_search(name).is_err() {
            return Err(Error::MissingCounterpart {
                name: name.clone(),
                missing_in: rain_dir,
            });
        }
    }
    rain_names
        .into_iter()
        .map(|name| {
            let rainy = ImageTensor::load(rain_dir.join(&name))?;
            let clean = ImageTensor::load(clean_dir.join(&name))?;
            if !rainy.same_shape(&clean) {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: rainy {:?} vs clean {:?}",
                    rainy.shape(),
                    clean.shape()
                )));
            }
            PairedSample::new(name, rainy, clean)
        })
        .collect()
}

/// Indices into a clean pool of size `pool_len`, one per real image, drawn uniformly.
pub fn assign_fake_labels(count: usize, pool_len: usize, seed: u64) -> Result<Vec<usize>> {
    if pool_len == 0 {
        return Err(Error::EmptyDataset("clean pool for fake labels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| rng.random_range(0..pool_len)).collect())
}

pub fn load_unpaired_dataset(
    rain_root: impl AsRef<Path>,
    clean_pool: &[ImageTensor],
    seed: u64,
) -> Result<Vec<UnpairedSample>> {
    let rain_root = rain_root.as_ref();
    if clean_pool.is_empty() {
        return Err(Error::EmptyDataset("clean pool for fake labels".into()));
    }
    let names = list_images(rain_root)?;
    if names.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no rainy images in {}",
            rain_root.display()
        )));
    }
    let picks = assign_fake_labels(names.len(), clean_pool.len(), seed)?;
    names
        .into_iter()
        .zip(picks)
        .map(|(name, pick)| {
            let rainy = ImageTensor::load(rain_root.join(&name))?;
            let fake_label = clean_pool[pick].fit_to(rainy.height(), rainy.width())?;
            UnpairedSample::new(name, rainy, fake_label)
        })
        .collect()
}

/// Row-major patch grid at offsets `0, stride, 2*stride, ...` along each axis.
pub fn extract_patches(image: &ImageTensor, patch: usize, stride: usize) -> Result<Vec<ImageTensor>> {
    if stride == 0 || patch == 0 {
        return Err(Error::Config("patch and stride must be at least 1".into()));
    }
    let (h, w) = (image.height(), image.width());
    if h < patch || w < patch {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            patch,
        });
    }
    let rows = (h - patch) / stride + 1;
    let cols = (w - patch) / stride + 1;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(image.crop(r * stride, c * stride, patch, patch)?);
        }
    }
    Ok(out)
}

/// Patches every pair; images smaller than the patch are skipped with a warning.
pub fn patch_paired(samples: &[PairedSample], patch: usize, stride: usize) -> Result<Vec<PairedSample>> {
    let mut out = Vec::new();
    for s in samples {
        let rainy = match extract_patches(&s.rainy, patch, stride) {
            Ok(p) => p,
            Err(Error::ImageTooSmall { .. }) => {
                log::warn!("skipping {}: smaller than {patch}x{patch} patch", s.name);
                continue;
            }
            Err(e) => return Err(e),
        };
        let clean = extract_patches(&s.clean, patch, stride)?;
        for (i, (r, c)) in rainy.into_iter().zip(clean).enumerate() {
            out.push(PairedSample::new(format!("{}#{i}", s.name), r, c)?);
        }
    }
    Ok(out)
}

pub fn patch_unpaired(samples: &[UnpairedSample], patch: usize, stride: usize) -> Result<Vec<UnpairedSample>> {
    let mut out = Vec::new();
    for s in samples {
        let rainy = match extract_patches(&s.rainy, patch, stride) {
            Ok(p) => p,
            Err(Error::ImageTooSmall { .. }) => {
                log::warn!("skipping {}: smaller than {patch}x{patch} patch", s.name);
                continue;
            }
            Err(e) => return Err(e),
        };
        let fake = extract_patches(&s.fake_label, patch, stride)?;
        for (i, (r, f)) in rainy.into_iter().zip(fake).enumerate() {
            out.push(UnpairedSample::new(format!("{}#{i}", s.name), r, f)?);
        }
    }
    Ok(out)
}

/// `[B, 3, P, P]` synthetic batch.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub rainy: Tensor,
    pub clean: Tensor,
}

/// `[B, 3, P, P]` real batch with fake labels.
#[derive(Debug, Clone)]
pub struct UnpairedBatch {
    pub rainy: Tensor,
    pub fake_label: Tensor,
}

impl PairedBatch {
    pub fn from_samples(samples: &[&PairedSample], device: &Device, dtype: DType) -> Result<Self> {
        let rainy: Vec<_> = samples.iter().map(|s| &s.rainy).collect();
        let clean: Vec<_> = samples.iter().map(|s| &s.clean).collect();
        Ok(Self {
            rainy: stack_images(&rainy, device, dtype)?,
            clean: stack_images(&clean, device, dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.rainy.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl UnpairedBatch {
    pub fn from_samples(samples: &[&UnpairedSample], device: &Device, dtype: DType) -> Result<Self> {
        let rainy: Vec<_> = samples.iter().map(|s| &s.rainy).collect();
        let fake: Vec<_> = samples.iter().map(|s| &s.fake_label).collect();
        Ok(Self {
            rainy: stack_images(&rainy, device, dtype)?,
            fake_label: stack_images(&fake, device, dtype)?,
        })
    }
}

/// Index plan of one step: positions into the paired and unpaired sample lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    pub paired: Vec<usize>,
    pub unpaired: Option<Vec<usize>>,
}

/// Pairs a paired stream with a (cycling) unpaired stream.
///
/// One epoch is one pass over the paired stream. The unpaired stream is a
/// continuous sequence of shuffled passes, so it repeats inside an epoch when it
/// is shorter and carries over between epochs when it is longer. Orders depend
/// only on `(seed, epoch)` and `(seed, cycle)`, which makes any epoch
/// reproducible without replaying earlier ones.
#[derive(Debug, Clone)]
pub struct MixedLoader<'a> {
    paired: &'a [PairedSample],
    unpaired: &'a [UnpairedSample],
    batch_size: usize,
    seed: u64,
    device: Device,
    dtype: DType,
}

impl<'a> MixedLoader<'a> {
    pub fn new(
        paired: &'a [PairedSample],
        unpaired: &'a [UnpairedSample],
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if paired.is_empty() {
            return Err(Error::EmptyDataset("the paired synthetic stream is required".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(Self {
            paired,
            unpaired,
            batch_size,
            seed,
            device: Device::Cpu,
            dtype: DType::F32,
        })
    }

    pub fn with_device(mut self, device: Device, dtype: DType) -> Self {
        self.device = device;
        self.dtype = dtype;
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.paired.len().div_ceil(self.batch_size)
    }

    fn permutation(&self, len: usize, stream: u64, index: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(index) << 32);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Index plans of every step in `epoch`.
    pub fn plan_epoch(&self, epoch: usize) -> Vec<StepPlan> {
        let order = self.permutation(self.paired.len(), 1, epoch as u64);
        let steps = self.steps_per_epoch();
        let n_u = self.unpaired.len();
        let mut cycle_cache: Option<(usize, Vec<usize>)> = None;
        let mut plans = Vec::with_capacity(steps);
        for step in 0..steps {
            let paired: Vec<usize> = order
                .iter()
                .skip(step * self.batch_size)
                .take(self.batch_size)
                .copied()
                .collect();
            let unpaired = (n_u > 0).then(|| {
                let start = (epoch * steps + step) * self.batch_size;
                (start..start + paired.len())
                    .map(|k| {
                        let cycle = k / n_u;
                        if cycle_cache.as_ref().map(|c| c.0) != Some(cycle) {
                            cycle_cache = Some((cycle, self.permutation(n_u, 2, cycle as u64)));
                        }
                        cycle_cache.as_ref().unwrap().1[k % n_u]
                    })
                    .collect()
            });
            plans.push(StepPlan { paired, unpaired });
        }
        plans
    }

    /// Stacked batches for `epoch`; the unpaired half is `None` when there is no real data.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<(PairedBatch, Option<UnpairedBatch>)>> + '_ {
        self.plan_epoch(epoch).into_iter().map(move |plan| {
            let p: Vec<_> = plan.paired.iter().map(|&i| &self.paired[i]).collect();
            let paired = PairedBatch::from_samples(&p, &self.device, self.dtype)?;
            let unpaired = match plan.unpaired {
                Some(idx) => {
                    let u: Vec<_> = idx.iter().map(|&i| &self.unpaired[i]).collect();
                    Some(UnpairedBatch::from_samples(&u, &self.device, self.dtype)?)
                }
                None => None,
            };
            Ok((paired, unpaired))
        })
    }
}
