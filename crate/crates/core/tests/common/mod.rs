#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use derain_core::data::{PairedBatch, PairedSample, UnpairedBatch, UnpairedSample};
use derain_core::image::ImageTensor;
use derain_core::nn::{BackboneConfig, ModelConfig};
use derain_core::toy::{generate_toy_rain, toy_background, ToyRainConfig};
use derain_core::train::{Precision, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest useful model; 16-pixel patches.
pub fn micro_model() -> ModelConfig {
    ModelConfig {
        ssrml_channels: 4,
        ssrml_iterations: 2,
        ssrml_blocks: 1,
        unet_depth: 1,
        unet_base_channels: 4,
        disc_scales: 2,
        disc_layers_per_scale: 3,
        disc_base_channels: 4,
    }
}

pub fn micro_config(precision: Precision) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        decay_start_epoch: 4,
        batch_size: 2,
        patch: 16,
        stride: 16,
        seed: 11,
        checkpoint_every: 2,
        precision,
        model: micro_model(),
        perceptual: BackboneConfig::Surrogate { seed: 3, channels: 4 },
        ..TrainConfig::default()
    }
}

pub fn toy_paired(n: usize, size: usize, seed: u64) -> Vec<PairedSample> {
    (0..n)
        .map(|i| {
            let clean = toy_background(size, seed * 100 + i as u64).unwrap();
            let cfg = ToyRainConfig {
                streak_count: 3 + size / 8,
                seed: seed * 100 + 50 + i as u64,
                ..ToyRainConfig::synthetic(size, 0)
            };
            let (rainy, _) = generate_toy_rain(&cfg, &clean).unwrap();
            PairedSample::new(format!("p{i:02}"), rainy, clean).unwrap()
        })
        .collect()
}

pub fn toy_unpaired(n: usize, size: usize, seed: u64) -> Vec<UnpairedSample> {
    (0..n)
        .map(|i| {
            let clean = toy_background(size, seed * 100 + 70 + i as u64).unwrap();
            let cfg = ToyRainConfig {
                streak_count: 3 + size / 8,
                seed: seed * 100 + 90 + i as u64,
                ..ToyRainConfig::pseudo_real(size, 0)
            };
            let (rainy, _) = generate_toy_rain(&cfg, &clean).unwrap();
            let label = toy_background(size, seed * 100 + i as u64).unwrap();
            UnpairedSample::new(format!("u{i:02}"), rainy, label).unwrap()
        })
        .collect()
}

pub fn batches(paired: &[PairedSample], unpaired: &[UnpairedSample], dtype: DType) -> (PairedBatch, UnpairedBatch) {
    let p: Vec<_> = paired.iter().collect();
    let u: Vec<_> = unpaired.iter().collect();
    (
        PairedBatch::from_samples(&p, &Device::Cpu, dtype).unwrap(),
        UnpairedBatch::from_samples(&u, &Device::Cpu, dtype).unwrap(),
    )
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), lo: f64, hi: f64) -> Tensor {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    Tensor::from_vec(random_values(rng, n, lo, hi), shape, &Device::Cpu).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(c, h, w, |_, _, _| rng.random_range(0.0..1.0f32)).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

pub fn value(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Reference SSIM with explicit loops: 11x11 Gaussian (sigma 1.5) truncated at
/// the border and renormalised, averaged over channels and pixels.
pub fn ssim_oracle(x: &[f64], y: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let g: Vec<f64> = {
        let raw: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let at = |img: &[f64], i: usize, j: usize| img[(ch * h + i) * w + j];
        for i in 0..h {
            for j in 0..w {
                let (mut sw, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..11 {
                    for dj in 0..11 {
                        let (ii, jj) = (i as isize + di as isize - 5, j as isize + dj as isize - 5);
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                            continue;
                        }
                        let wt = g[di] * g[dj];
                        let (a, b) = (at(x, ii as usize, jj as usize), at(y, ii as usize, jj as usize));
                        sw += wt;
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let (mx, my) = (mx / sw, my / sw);
                let vx = sxx / sw - mx * mx;
                let vy = syy / sw - my * my;
                let cov = sxy / sw - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (c * h * w) as f64
}

pub fn psnr_oracle(x: &[f64], y: &[f64]) -> f64 {
    let mut sse = 0.0;
    for i in 0..x.len() {
        sse += (x[i] - y[i]) * (x[i] - y[i]);
    }
    let mse = sse / x.len() as f64;
    if mse == 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}
