//! Full-reference image quality: PSNR, SSIM and dataset reports.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::data::{load_paired_dataset, PairedSample};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses;
use crate::nn::{Derainer, IdentityDerainer};

/// Reported PSNR of identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    x.ensure_same_shape(y, "psnr")?;
    let sse: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    let mse = sse / x.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn luminance(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels() == 1 {
        return Ok(img.clone());
    }
    ImageTensor::from_fn(1, img.height(), img.width(), |_, y, x| {
        0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
    })
}

/// Mean SSIM, averaged over RGB channels or computed on luminance only.
pub fn ssim(x: &ImageTensor, y: &ImageTensor, luminance_only: bool) -> Result<f64> {
    x.ensure_same_shape(y, "ssim")?;
    let (x, y) = if luminance_only {
        (luminance(x)?, luminance(y)?)
    } else {
        (x.clone(), y.clone())
    };
    let tx = x.to_tensor(&Device::Cpu, DType::F64)?;
    let ty = y.to_tensor(&Device::Cpu, DType::F64)?;
    losses::scalar(&losses::ssim(&tx, &ty)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub checkpoint_id: String,
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    pub fn new(dataset_id: impl Into<String>, checkpoint_id: impl Into<String>, per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean_psnr_db = per_image.iter().map(|m| m.psnr_db).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|m| m.ssim).sum::<f64>() / n;
        Self {
            dataset_id: dataset_id.into(),
            checkpoint_id: checkpoint_id.into(),
            per_image,
            mean_psnr_db,
            mean_ssim,
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_creating_parent(path, serde_json::to_string_pretty(self)?)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Columns `name,psnr_db,ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim\n");
        for m in &self.per_image {
            let name = if m.name.contains([',', '"', '\n']) {
                format!("\"{}\"", m.name.replace('"', "\"\""))
            } else {
                m.name.clone()
            };
            out.push_str(&format!("{name},{},{}\n", m.psnr_db, m.ssim));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_creating_parent(path.as_ref(), self.to_csv())
    }
}

fn write_creating_parent(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub luminance_ssim: bool,
}

/// Derains every sample whole and scores it against its clean reference.
pub fn evaluate_samples(
    derainer: &dyn Derainer,
    samples: &[PairedSample],
    dataset_id: &str,
    checkpoint_id: &str,
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let per_image = samples
        .iter()
        .map(|s| {
            let out = derainer.derain(&s.rainy)?;
            Ok(ImageMetrics {
                name: s.name.clone(),
                psnr_db: psnr(&out, &s.clean)?,
                ssim: ssim(&out, &s.clean, opts.luminance_ssim)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(dataset_id, checkpoint_id, per_image))
}

/// [`evaluate_samples`] over a paired test directory (`rain/`, `clean/`).
pub fn evaluate_dataset(
    derainer: &dyn Derainer,
    test_root: impl AsRef<Path>,
    checkpoint_id: &str,
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let root = test_root.as_ref();
    let samples = load_paired_dataset(root)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("no test pairs in {}", root.display())));
    }
    evaluate_samples(derainer, &samples, &root.display().to_string(), checkpoint_id, opts)
}

/// Scores of the rainy inputs themselves.
pub fn input_baseline(test_root: impl AsRef<Path>, opts: EvalOptions) -> Result<MetricsReport> {
    evaluate_dataset(&IdentityDerainer, test_root, "input", opts)
}
