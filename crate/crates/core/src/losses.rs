//! Loss terms of the supervised and unsupervised processes.
//!
//! Tensor-valued losses return 0-d tensors so they can be back-propagated; the
//! weighted combinations also have scalar forms used for logging and replay.
//!
//! Conventions:
//! - adversarial terms average over positions, batch and discriminator scales,
//!   with scores clamped to `[1e-7, 1 - 1e-7]` before the logarithm;
//! - the generator side uses the non-saturating `-log D(fake)`;
//! - SSIM uses an 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`, `K2 = 0.03`,
//!   dynamic range 1; near the border the window is truncated and renormalised;
//! - cycle consistency is L1, total variation is anisotropic L1; both and the
//!   perceptual term are means over elements.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DiscScores, FeatureExtractor};

pub const SCORE_EPS: f64 = 1e-7;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalised 1-d Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn ensure_same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Separable zero-padded Gaussian blur of every plane of a `[N, 1, H, W]` tensor.
/// Same-size separable blur of every `H x W` plane with zero padding.
///
/// With a symmetric kernel the operator is self-adjoint, so the gradient is the
/// same blur applied to the incoming gradient.
struct SeparableBlur {
    taps: Vec<f64>,
}

impl SeparableBlur {
    fn run<T: candle_core::WithDType>(&self, src: &[T], h: usize, w: usize) -> Vec<T> {
        let half = self.taps.len() / 2;
        let plane = h * w;
        let mut tmp = vec![0f64; plane];
        let mut out = vec![T::zero(); src.len()];
        for (p, img) in src.chunks_exact(plane).enumerate() {
            for y in 0..h {
                let row = &img[y * w..(y + 1) * w];
                for x in 0..w {
                    let lo = x.saturating_sub(half);
                    let hi = (x + half + 1).min(w);
                    let mut acc = 0.0;
                    for (j, v) in row[lo..hi].iter().enumerate() {
                        acc += self.taps[lo + j + half - x] * v.to_f64();
                    }
                    tmp[y * w + x] = acc;
                }
            }
            let dst = &mut out[p * plane..(p + 1) * plane];
            for y in 0..h {
                let lo = y.saturating_sub(half);
                let hi = (y + half + 1).min(h);
                for x in 0..w {
                    let mut acc = 0.0;
                    for yy in lo..hi {
                        acc += self.taps[yy + half - y] * tmp[yy * w + x];
                    }
                    dst[y * w + x] = T::from_f64(acc);
                }
            }
        }
        out
    }
}

impl candle_core::CustomOp1 for SeparableBlur {
    fn name(&self) -> &'static str {
        "separable-blur"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let dims = layout.dims();
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("blur expects a contiguous tensor".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(&v[start..end], h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(&v[start..end], h, w)),
            _ => return Err(candle_core::Error::Msg("blur supports f32 and f64".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = SeparableBlur {
            taps: self.taps.clone(),
        };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

fn blur(x: &Tensor) -> Result<Tensor> {
    let op = SeparableBlur {
        taps: gaussian_taps(SSIM_WINDOW, SSIM_SIGMA),
    };
    Ok(x.contiguous()?.apply_op1(op)?)
}

/// Local SSIM at every pixel, `[B, C, H, W]`.
pub fn ssim_map(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    ensure_same_dims(x, y, "ssim")?;
    let (_, _, h, w) = x.dims4()?;
    let norm = blur(&Tensor::ones((1, 1, h, w), x.dtype(), x.device())?)?;
    let filt = |t: &Tensor| -> Result<Tensor> { Ok(blur(t)?.broadcast_div(&norm)?) };
    let mu_x = filt(x)?;
    let mu_y = filt(y)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let var_x = (filt(&x.sqr()?)? - &mu_xx)?;
    let var_y = (filt(&y.sqr()?)? - &mu_yy)?;
    let cov = (filt(&(x * y)?)? - &mu_xy)?;
    let num = ((mu_xy * 2.0)? + SSIM_C1)?.mul(&((cov * 2.0)? + SSIM_C2)?)?;
    let den = ((mu_xx + mu_yy)? + SSIM_C1)?.mul(&((var_x + var_y)? + SSIM_C2)?)?;
    Ok(num.div(&den)?)
}

/// Mean SSIM over batch, channels and positions.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(ssim_map(x, y)?.mean_all()?)
}

/// `-SSIM(y_s, ỹ_s)`.
pub fn ssim_loss(target: &Tensor, output: &Tensor) -> Result<Tensor> {
    Ok(ssim(target, output)?.neg()?)
}

/// Mean squared difference of frozen features.
pub fn perceptual_loss(backbone: &FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_dims(a, b, "perceptual loss")?;
    let fa = backbone.forward(a)?;
    let fb = backbone.forward(b)?;
    Ok((fa - fb)?.sqr()?.mean_all()?)
}

/// Mean absolute difference between a real rainy batch and its reconstruction.
pub fn cycle_loss(x: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    ensure_same_dims(x, reconstructed, "cycle loss")?;
    Ok((x - reconstructed)?.abs()?.mean_all()?)
}

/// Anisotropic total variation divided by the element count.
pub fn tv_loss(y: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = y.dims4()?;
    let count = y.elem_count() as f64;
    let mut total = Tensor::zeros((), y.dtype(), y.device())?;
    if h > 1 {
        let dv = (y.narrow(2, 1, h - 1)? - y.narrow(2, 0, h - 1)?)?;
        total = (total + dv.abs()?.sum_all()?)?;
    }
    if w > 1 {
        let dh = (y.narrow(3, 1, w - 1)? - y.narrow(3, 0, w - 1)?)?;
        total = (total + dh.abs()?.sum_all()?)?;
    }
    Ok((total / count)?)
}

fn clamp_scores(t: &Tensor) -> Result<Tensor> {
    Ok(t.clamp(SCORE_EPS, 1.0 - SCORE_EPS)?)
}

fn average_over_scales(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len() as f64;
    let stacked = Tensor::stack(&terms, 0)?;
    Ok((stacked.sum_all()? / n)?)
}

/// Discriminator objective `-log D(real) - log(1 - D(fake))`, averaged over scales.
pub fn disc_loss(real: &DiscScores, fake: &DiscScores) -> Result<Tensor> {
    if real.scales() != fake.scales() || real.scales() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "discriminator loss: {} real scales vs {} fake scales",
            real.scales(),
            fake.scales()
        )));
    }
    let terms = real
        .maps()
        .iter()
        .zip(fake.maps())
        .map(|(r, f)| {
            let r = clamp_scores(r)?.log()?.mean_all()?;
            let f = clamp_scores(f)?.affine(-1.0, 1.0)?.log()?.mean_all()?;
            Ok((r + f)?.neg()?)
        })
        .collect::<Result<Vec<_>>>()?;
    average_over_scales(terms)
}

/// Non-saturating generator objective `-log D(fake)`, averaged over scales.
pub fn gen_adv_loss(fake: &DiscScores) -> Result<Tensor> {
    if fake.scales() == 0 {
        return Err(Error::ShapeMismatch("generator loss: no score maps".into()));
    }
    let terms = fake
        .maps()
        .iter()
        .map(|f| Ok(clamp_scores(f)?.log()?.mean_all()?.neg()?))
        .collect::<Result<Vec<_>>>()?;
    average_over_scales(terms)
}

/// Trade-off weights of the supervised, unsupervised and total objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adv_super: f64,
    pub per_super: f64,
    pub ssim: f64,
    pub adv_unsup: f64,
    pub cc: f64,
    pub per_unsup: f64,
    pub tv: f64,
    pub unsup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv_super: 1.0,
            per_super: 1.0,
            ssim: 1.0,
            adv_unsup: 1.5e-5,
            cc: 10.0,
            per_unsup: 1.0,
            tv: 100.0,
            unsup: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("adv_super", self.adv_super),
            ("per_super", self.per_super),
            ("ssim", self.ssim),
            ("adv_unsup", self.adv_unsup),
            ("cc", self.cc),
            ("per_unsup", self.per_unsup),
            ("tv", self.tv),
            ("unsup", self.unsup),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "weights.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Supervised terms; `adv` already contains the paired-discriminator term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SupervisedTerms {
    pub adv: f64,
    pub per: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UnsupervisedTerms {
    pub adv: f64,
    pub cc: f64,
    pub per: f64,
    pub tv: f64,
}

fn ensure_finite(terms: &[(&str, f64)]) -> Result<()> {
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::NonFinite { term: name.to_string() }),
        None => Ok(()),
    }
}

pub fn supervised_loss(terms: &SupervisedTerms, w: &LossWeights) -> Result<f64> {
    ensure_finite(&[("adv_super", terms.adv), ("per_super", terms.per), ("ssim", terms.ssim)])?;
    Ok(w.adv_super * terms.adv + w.per_super * terms.per + w.ssim * terms.ssim)
}

pub fn unsupervised_loss(terms: &UnsupervisedTerms, w: &LossWeights) -> Result<f64> {
    ensure_finite(&[
        ("adv_unsup", terms.adv),
        ("cc", terms.cc),
        ("per_unsup", terms.per),
        ("tv", terms.tv),
    ])?;
    Ok(w.adv_unsup * terms.adv + w.cc * terms.cc + w.per_unsup * terms.per + w.tv * terms.tv)
}

pub fn total_loss(super_total: f64, unsup_total: f64, w: &LossWeights) -> f64 {
    super_total + w.unsup * unsup_total
}

/// Every loss scalar of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Generator adversarial term of the synthetic branch, including `adv_pair`.
    pub adv_super: f64,
    pub adv_pair: f64,
    pub per_super: f64,
    pub ssim: f64,
    pub super_total: f64,
    pub adv_unsup: f64,
    pub cc: f64,
    pub per_unsup: f64,
    pub tv: f64,
    pub unsup_total: f64,
    pub total: f64,
    pub d_s: f64,
    pub d_r: f64,
    pub d_p: f64,
}

impl LossBreakdown {
    pub fn named(&self) -> [(&'static str, f64); 14] {
        [
            ("adv_super", self.adv_super),
            ("adv_pair", self.adv_pair),
            ("per_super", self.per_super),
            ("ssim", self.ssim),
            ("super_total", self.super_total),
            ("adv_unsup", self.adv_unsup),
            ("cc", self.cc),
            ("per_unsup", self.per_unsup),
            ("tv", self.tv),
            ("unsup_total", self.unsup_total),
            ("total", self.total),
            ("d_s", self.d_s),
            ("d_r", self.d_r),
            ("d_p", self.d_p),
        ]
    }

    /// Errors with the first non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        ensure_finite(&self.named())
    }

    pub fn supervised_terms(&self) -> SupervisedTerms {
        SupervisedTerms {
            adv: self.adv_super,
            per: self.per_super,
            ssim: self.ssim,
        }
    }

    pub fn unsupervised_terms(&self) -> UnsupervisedTerms {
        UnsupervisedTerms {
            adv: self.adv_unsup,
            cc: self.cc,
            per: self.per_unsup,
            tv: self.tv,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub weights: LossWeights,
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = Tensor::rand(0f64, 1.0, (2, 3, 9, 7), &Device::Cpu).unwrap();
        let s = scalar(&ssim(&x, &x).unwrap()).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
        assert!((scalar(&ssim_loss(&x, &x).unwrap()).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_constant_images_has_closed_form() {
        let a = Tensor::full(0.5f64, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let b = Tensor::full(0.25f64, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let expected = (2.0 * 0.5 * 0.25 + SSIM_C1) / (0.25 + 0.0625 + SSIM_C1);
        let s = scalar(&ssim(&a, &b).unwrap()).unwrap();
        assert!((s - expected).abs() < 1e-9, "{s} vs {expected}");
        assert!((expected - 0.80006).abs() < 1e-5);
        let l = scalar(&ssim_loss(&a, &b).unwrap()).unwrap();
        assert!((l + expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_mismatched_shapes() {
        let a = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 3, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(ssim(&a, &b).is_err());
        assert!(cycle_loss(&a, &b).is_err());
    }

    #[test]
    fn tv_of_step_image() {
        let y = t(&[0.0, 1.0, 0.0, 1.0], (1, 1, 2, 2));
        assert_eq!(scalar(&tv_loss(&y).unwrap()).unwrap(), 0.5);
        let flat = Tensor::full(0.3f64, (2, 3, 5, 5), &Device::Cpu).unwrap();
        assert_eq!(scalar(&tv_loss(&flat).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn cycle_of_constant_offset() {
        let a = Tensor::zeros((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::full(0.5f64, (2, 3, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(scalar(&cycle_loss(&a, &b).unwrap()).unwrap(), 0.5);
        assert_eq!(scalar(&cycle_loss(&a, &a).unwrap()).unwrap(), 0.0);
    }

    fn constant_scores(v: f64, sizes: &[usize]) -> DiscScores {
        DiscScores(
            sizes
                .iter()
                .map(|&n| Tensor::full(v, (2, 1, n, n), &Device::Cpu).unwrap())
                .collect(),
        )
    }

    #[test]
    fn adversarial_losses_at_half() {
        let half = constant_scores(0.5, &[4, 2, 1]);
        let d = scalar(&disc_loss(&half, &half).unwrap()).unwrap();
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let g = scalar(&gen_adv_loss(&half).unwrap()).unwrap();
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_losses_at_saturation() {
        let real = constant_scores(1.0, &[3]);
        let fake = constant_scores(0.0, &[3]);
        assert!(scalar(&disc_loss(&real, &fake).unwrap()).unwrap() < 1e-6);
        assert!(scalar(&gen_adv_loss(&real).unwrap()).unwrap() < 1e-6);
        assert!(scalar(&gen_adv_loss(&fake).unwrap()).unwrap().is_finite());
    }

    #[test]
    fn disc_loss_needs_matching_scales() {
        assert!(disc_loss(&constant_scores(0.5, &[2, 1]), &constant_scores(0.5, &[2])).is_err());
    }

    #[test]
    fn disc_loss_is_minimised_at_real_one_fake_zero() {
        let grid: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let value =
            |r: f64, f: f64| scalar(&disc_loss(&constant_scores(r, &[2]), &constant_scores(f, &[2])).unwrap()).unwrap();
        for &f in &grid {
            for pair in grid.windows(2) {
                assert!(value(pair[1], f) < value(pair[0], f));
            }
        }
        for &r in &grid {
            for pair in grid.windows(2) {
                assert!(value(r, pair[0]) < value(r, pair[1]));
            }
        }
    }

    #[test]
    fn weighted_sums() {
        let w = LossWeights::default();
        let s = supervised_loss(
            &SupervisedTerms {
                adv: 0.5,
                per: 0.2,
                ssim: -0.9,
            },
            &w,
        )
        .unwrap();
        assert!((s + 0.2).abs() < 1e-12);
        let u = unsupervised_loss(
            &UnsupervisedTerms {
                adv: 1.0,
                cc: 0.1,
                per: 0.2,
                tv: 0.005,
            },
            &w,
        )
        .unwrap();
        assert!((u - 1.700015).abs() < 1e-12, "{u}");
        assert_eq!(total_loss(2.0, 3.0, &w), 5.0);
        let no_real = LossWeights { unsup: 0.0, ..w };
        assert_eq!(total_loss(2.0, 3.0, &no_real), 2.0);
        assert_eq!(supervised_loss(&SupervisedTerms::default(), &w).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_terms_are_named() {
        let err = unsupervised_loss(
            &UnsupervisedTerms {
                cc: f64::NAN,
                ..Default::default()
            },
            &LossWeights::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("cc"));
    }

    #[test]
    fn record_serialises_flat() {
        let rec = LossRecord {
            step: 3,
            epoch: 0,
            losses: LossBreakdown {
                total: 1.5,
                ..Default::default()
            },
            weights: LossWeights::default(),
        };
        let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
        assert_eq!(v["step"], 3);
        assert_eq!(v["total"], 1.5);
        assert_eq!(v["weights"]["tv"], 100.0);
        let back: LossRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, rec);
    }
}
